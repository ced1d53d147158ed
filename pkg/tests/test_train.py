import csv
import dataclasses
import json

import numpy as np
import pytest

from cmlsnn.data import SynthSpec, gen_synthetic
from cmlsnn.downsample import Variant
from cmlsnn.train import (PUBLISHED_CML_DELTAS, PUBLISHED_ACCURACY, CompareError, DivergenceError, RunConfig, compare,
                          load_dataset, train)

SMALL = dict(timesteps=2, epochs=2, batch=8, lr=0.03, widths=(4, 8), synth_size=8,
             synth_per_class=8, synth_test_per_class=4, precision="f64")


def strip_time(records):
    return [{k: v for k, v in dataclasses.asdict(r).items() if k != "wall_time"} for r in records]


def test_run_is_reproducible():
    cfg = RunConfig(arch="cml", seed=3, **SMALL)
    a = train(cfg)
    b = train(cfg)
    assert strip_time(a.records) == strip_time(b.records)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        np.testing.assert_array_equal(pa, pb)


def test_seed_changes_run():
    a = train(RunConfig(arch="cml", seed=1, **SMALL))
    b = train(RunConfig(arch="cml", seed=2, **SMALL))
    assert a.dataset_id == b.dataset_id
    assert strip_time(a.records) != strip_time(b.records)


@pytest.mark.parametrize("arch", [v.value for v in Variant])
def test_loss_decreases(arch):
    cfg = RunConfig(arch=arch, seed=0, **{**SMALL, "epochs": 5})
    recs = train(cfg).records
    assert [r.epoch for r in recs] == list(range(6))
    assert recs[5].train_loss < recs[0].train_loss


def test_outputs_written(tmp_path):
    cfg = RunConfig(arch="baseline", out=str(tmp_path / "run"), **SMALL)
    res = train(cfg)
    run = tmp_path / "run"
    assert RunConfig.load(run / "config.json") == cfg
    lines = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert [l["epoch"] for l in lines] == [0, 1, 2]
    assert {"train_loss", "test_loss", "test_accuracy", "wall_time", "lif_updates"} <= set(lines[0])
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    final = json.loads((run / "final.json").read_text())
    assert final["status"] == "ok"
    assert final["final"]["test_accuracy"] == res.final.test_accuracy
    assert final["arch_label"] == "ConvBN-LIF-MaxPool"


def test_runconfig_roundtrip(tmp_path):
    cfg = RunConfig(arch="strideconv", dataset="cifar10", data_dir="/x", timesteps=4, epochs=30, batch=64,
                    lr=0.002, optimizer="sgd", seed=9, precision="f64", out="o", widths=(16, 32),
                    full_bptt=True, per_class=200, test_per_class=50, synth_noise=0.25)
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_runconfig_validation():
    with pytest.raises(ValueError):
        RunConfig(arch="resnet")
    with pytest.raises(ValueError):
        RunConfig(precision="f16")
    with pytest.raises(ValueError):
        RunConfig(optimizer="lion")
    with pytest.raises(ValueError):
        RunConfig(batch=0)
    with pytest.raises(ValueError, match="unknown RunConfig fields"):
        RunConfig.from_dict({"arch": "cml", "learning_rate": 1})


def test_divergence_aborts_with_record(tmp_path):
    cfg = RunConfig(out=str(tmp_path / "bad"), **SMALL)
    ds = load_dataset(cfg)
    ds.x_train[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(cfg, dataset=ds)
    final = json.loads((tmp_path / "bad" / "final.json").read_text())
    assert final["status"] == "diverged"
    assert final["diagnostic"]["epoch"] == 1
    assert final["diagnostic"]["non_finite"] == "gradient"
    last = json.loads((tmp_path / "bad" / "metrics.jsonl").read_text().splitlines()[-1])
    assert last["status"] == "diverged"


def test_divergent_loss(monkeypatch):
    import cmlsnn.train as tr

    real = tr.F.cross_entropy

    def exploding(logits, labels):
        out = real(logits, labels)
        out.data = np.asarray(np.inf)
        return out

    monkeypatch.setattr(tr.F, "cross_entropy", exploding)
    with pytest.raises(DivergenceError, match="non-finite loss"):
        train(RunConfig(**SMALL))


def test_synth_data_shared_across_seeds():
    a = load_dataset(RunConfig(seed=1, **SMALL))
    b = load_dataset(RunConfig(seed=2, **SMALL))
    np.testing.assert_array_equal(a.x_train, b.x_train)


# --- compare ----------------------------------------------------------------

@pytest.fixture(scope="module")
def four_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    runs = []
    for arch in [v.value for v in Variant]:
        for seed in (0, 1):
            out = root / f"{arch}-{seed}"
            train(RunConfig(arch=arch, seed=seed, out=str(out), **{**SMALL, "epochs": 1}))
            runs.append(out)
    return runs


def test_compare_table(four_runs, tmp_path):
    table = compare(four_runs, out=tmp_path)
    assert [r["method"] for r in table["rows"][::2]] == [
        "ConvBN-LIF-MaxPool", "ConvBN-MaxPool-LIF", "ConvBN-AvgPool-LIF", "ConvBN(stride=2)-LIF"]
    assert len(table["variants"]) == 4
    assert table["lif_update_ratio_baseline_over_cml"] == 4.0
    cml = table["paired_vs_baseline"]["cml"]
    assert set(cml["per_seed_delta_pp"]) == {0, 1}
    assert (tmp_path / "comparison.csv").read_text().count("\n") == 9
    saved = json.loads((tmp_path / "comparison.json").read_text())
    assert saved["published_reference"]["cml_minus_baseline_pp"] == PUBLISHED_CML_DELTAS


def test_compare_needs_two(four_runs):
    with pytest.raises(CompareError, match="at least two"):
        compare(four_runs[:1])


def test_compare_refuses_mixed_data(four_runs, tmp_path):
    other = tmp_path / "noisy"
    train(RunConfig(out=str(other), **{**SMALL, "epochs": 0, "synth_noise": 0.5}))
    with pytest.raises(CompareError, match="different datasets"):
        compare([four_runs[0], other])


def test_published_deltas_match_accuracies():
    for model, deltas in PUBLISHED_CML_DELTAS.items():
        for ds, d in deltas.items():
            rows = PUBLISHED_ACCURACY[model]
            assert round(rows["cml"][ds] - rows["baseline"][ds], 2) == d


def test_train_accepts_dataset_object():
    ds = gen_synthetic(SynthSpec(image_size=8, samples_per_class=4, test_per_class=2, block=2))
    res = train(RunConfig(**{**SMALL, "epochs": 1}), dataset=ds.astype(np.float64))
    assert len(res.records) == 2


def test_running_train_metrics():
    n = 4 * SMALL["synth_per_class"]
    evald = train(RunConfig(seed=4, **SMALL))
    running = train(RunConfig(seed=4, eval_train=False, **{**SMALL, "batch": n}))
    # one batch per epoch: the running loss is the pre-step loss of that batch
    for r in running.records[1:]:
        assert r.train_loss == pytest.approx(r.batch_loss, rel=1e-12)
        assert (r.train_accuracy * n) == pytest.approx(round(r.train_accuracy * n))
    assert running.records[0].train_loss == pytest.approx(evald.records[0].train_loss)


def test_running_metrics_do_not_change_trajectory():
    a = train(RunConfig(seed=5, **SMALL))
    b = train(RunConfig(seed=5, eval_train=False, **SMALL))
    assert [r.test_accuracy for r in a.records] == [r.test_accuracy for r in b.records]
    assert [r.test_loss for r in a.records] == [r.test_loss for r in b.records]
