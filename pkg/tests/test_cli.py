import csv

import numpy as np
import pytest

from metatpp import cli, data
from metatpp.baselines import hpp_fit, hpp_nll
from metatpp.checkpoint import Checkpoint, checkpoint_from_model, model_from_checkpoint
from metatpp.evalsim import MetricsReport
from metatpp.intensity import IntensityModel

from conftest import tiny_config

SMALL_MODEL = """\
mnn_width = 16
lstm_hidden = 6
support_dim = 6
task_dim = 4
fusion_layers = 1
fusion_units = 8
batch_size = 8
lr = 0.003
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    (root / "spec.txt").write_text("n_tasks = 40\nrate_range = 0.4, 1.6\nphase_range = 0, 4\nseed = 3\n")
    assert cli.main(["gen-synth", "--spec", str(root / "spec.txt"), "--out", str(root / "ds")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(synth):
    cfg = synth / "run.cfg"
    cfg.write_text(f"manifest = ds/manifest.txt\nout_dir = run\nepochs = 10\n{SMALL_MODEL}")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return synth


def test_gen_synth_splits_and_determinism(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("n_tasks = 100\nseed = 8\n")
    assert cli.main(["gen-synth", "--spec", str(spec), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["gen-synth", "--spec", str(spec), "--out", str(tmp_path / "b")]) == 0
    for name in ("events.csv", "contexts.csv", "splits.csv", "manifest.txt", "generator.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    splits = data.read_splits_csv(tmp_path / "a" / "splits.csv")
    assert len(splits) == 100
    counts = {s: sum(v == s for v in splits.values()) for s in data.SPLITS}
    assert counts == {"train": 60, "val": 20, "test": 20}
    events = data.read_events_csv(tmp_path / "a" / "events.csv")
    ctx, k = data.read_contexts_csv(tmp_path / "a" / "contexts.csv")
    assert k == 2
    tids = sorted(ctx)
    rates = [events[t].size / 168.0 if t in events else 0.0 for t in tids]
    assert np.corrcoef(rates, [ctx[t][0] for t in tids])[0, 1] > 0.9


def test_gen_synth_rejects_invalid_spec(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("rate_range = 0, 1\ndepth_range = 0.5, 1.5\n")
    assert cli.main(["gen-synth", "--spec", str(spec), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "rate_range" in err and "depth_range" in err


def test_train_outputs_and_log_selection(trained):
    run = trained / "run"
    log = _rows(run / "train_log.csv")
    assert log[0] == ["epoch", "train_loss", "val_nll"]
    assert len(log) == 11
    ck = Checkpoint.load(run / "checkpoint.bin")
    vals = [float(r[2]) for r in log[1:]]
    assert ck.epoch == int(np.argmin(vals)) + 1
    assert ck.val_nll == min(vals)


def test_train_is_deterministic(trained):
    cfg = trained / "run.cfg"
    assert cli.main(["train", "--config", str(cfg), "--set", "out_dir=run2"]) == 0
    for name in ("train_log.csv", "checkpoint.bin"):
        assert (trained / "run" / name).read_bytes() == (trained / "run2" / name).read_bytes()


def test_evaluate_checkpoint_and_fingerprint(trained, tmp_path):
    ds = trained / "ds" / "manifest.txt"
    ck = trained / "run" / "checkpoint.bin"
    out = tmp_path / "m.csv"
    assert cli.main(["evaluate", "--manifest", str(ds), "--checkpoint", str(ck),
                     "--config", str(trained / "run.cfg"), "--out", str(out)]) == 0
    n_test = len(data.ingest(data.DatasetManifest.load(ds)).episodes["test"])
    assert len(MetricsReport.read_csv(out).task_ids) == n_test
    assert cli.main(["evaluate", "--manifest", str(ds), "--checkpoint", str(ck), "--config",
                     str(trained / "run.cfg"), "--set", "mnn_width=32", "--out", str(out)]) == 2


def test_metrics_from_reloaded_checkpoint_are_identical(trained, tmp_path):
    ds = trained / "ds" / "manifest.txt"
    args = ["evaluate", "--manifest", str(ds), "--checkpoint", str(trained / "run" / "checkpoint.bin")]
    assert cli.main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_evaluate_hpp_matches_closed_form(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("n_tasks = 30\ndepth_range = 0, 0\nrate_range = 1, 1\n")
    cli.main(["gen-synth", "--spec", str(spec), "--out", str(tmp_path / "ds")])
    ds = tmp_path / "ds" / "manifest.txt"
    assert cli.main(["evaluate", "--manifest", str(ds), "--baseline", "hpp", "--out", str(tmp_path / "h.csv")]) == 0
    report = MetricsReport.read_csv(tmp_path / "h.csv")
    eps = data.ingest(data.DatasetManifest.load(ds)).episodes["test"]
    for ep, v in zip(eps, report.nll, strict=True):
        assert abs(v - hpp_nll(hpp_fit(ep), ep)) <= 1e-9


def test_baselines_train_and_evaluate(trained, tmp_path):
    cfg = trained / "run.cfg"
    ds = trained / "ds" / "manifest.txt"
    for kind in ("nnipp", "hawkes"):
        assert cli.main(["train", "--config", str(cfg), "--set", f"model={kind}", "--set", f"out_dir={kind}",
                         "--set", "epochs=2", "--set", "hawkes_steps=200"]) == 0
        assert cli.main(["evaluate", "--manifest", str(ds), "--checkpoint", str(trained / kind / "checkpoint.bin"),
                         "--baseline", kind, "--replicates", "5", "--out", str(tmp_path / f"{kind}.csv")]) == 0
        assert np.all(np.isfinite(MetricsReport.read_csv(tmp_path / f"{kind}.csv").mse))
    # a checkpoint of another kind is refused
    assert cli.main(["evaluate", "--manifest", str(ds), "--checkpoint", str(trained / "nnipp" / "checkpoint.bin"),
                     "--baseline", "hawkes", "--out", str(tmp_path / "x.csv")]) == 2


def _support_file(trained, path, include_query=False):
    events = data.read_events_csv(trained / "ds" / "events.csv")
    tid = sorted(events)[0]
    ts = events[tid] if include_query else events[tid][events[tid] <= 12.0]
    data.write_events_csv(path, [(tid, ts)])
    return tid


def test_predict_curve_contract(trained, tmp_path):
    _support_file(trained, tmp_path / "s.csv")
    ck = trained / "run" / "checkpoint.bin"
    out = tmp_path / "curve.csv"
    assert cli.main(["predict", "--checkpoint", str(ck), "--events", str(tmp_path / "s.csv"),
                     "--context", "0.5,-0.2", "--resolution", "100", "--out", str(out)]) == 0
    rows = _rows(out)
    assert rows[0] == ["t", "lambda", "expected_cum"]
    body = np.array(rows[1:], float)
    assert body.shape == (101, 3)
    assert body[0, 0] == 12.0 and body[-1, 0] == 168.0
    assert body[0, 2] == 0.0
    model = model_from_checkpoint(Checkpoint.load(ck))
    from metatpp.metatrain import split_episode
    from metatpp.encoder import EventSequence
    ckpt = Checkpoint.load(ck)
    mean = np.array([float.fromhex(x) for x in ckpt.extra["context_mean"]])
    std = np.array([float.fromhex(x) for x in ckpt.extra["context_std"]])
    sup = data.read_events_csv(tmp_path / "s.csv")
    (tid, ts), = sup.items()
    ep = split_episode(EventSequence(ts), (np.array([0.5, -0.2]) - mean) / std, 12.0, 168.0)
    cum = model.conditioned(ep).cumulative(np.array([12.0, 168.0]))
    assert body[-1, 2] == pytest.approx(cum[1] - cum[0], rel=1e-12)


def test_predict_refuses_query_events(trained, tmp_path, capsys):
    _support_file(trained, tmp_path / "all.csv", include_query=True)
    assert cli.main(["predict", "--checkpoint", str(trained / "run" / "checkpoint.bin"), "--events",
                     str(tmp_path / "all.csv"), "--context", "0,0", "--out", str(tmp_path / "c.csv")]) == 2
    assert "beyond T_c" in capsys.readouterr().err


def test_predict_periodic_only_model_repeats(tmp_path):
    model = IntensityModel(tiny_config(context_dim=0), seed=4, scale=6.0)
    for name, node in model.params.items():
        if name.startswith("aperiodic.") and name.split(".")[1] in ("w_t", "W1", "w_out"):
            node.value = np.zeros_like(node.value)
    checkpoint_from_model(model, extra={"T_c": 12.0, "T_e": 168.0}).save(tmp_path / "p.bin")
    data.write_events_csv(tmp_path / "s.csv", [("a", [1.0, 3.0, 5.0, 8.0, 11.0])])
    assert cli.main(["predict", "--checkpoint", str(tmp_path / "p.bin"), "--events", str(tmp_path / "s.csv"),
                     "--resolution", "156", "--out", str(tmp_path / "c.csv")]) == 0
    lam = np.array(_rows(tmp_path / "c.csv")[1:], float)[:, 1]
    np.testing.assert_allclose(lam[24:], lam[:-24], rtol=1e-9)


def test_simulate_round_trip_and_determinism(trained, tmp_path):
    ck = str(trained / "run" / "checkpoint.bin")
    ds = str(trained / "ds" / "manifest.txt")
    args = ["simulate", "--checkpoint", ck, "--manifest", ds, "--replicates", "20", "--seed", "2"]
    assert cli.main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    sims = data.read_events_csv(tmp_path / "a.csv")
    # query-window counts against the model's compensator mass
    res = data.ingest(data.DatasetManifest.load(ds))
    model = model_from_checkpoint(Checkpoint.load(ck))
    for ep in res.episodes["test"][:3]:
        cum = model.conditioned(ep).cumulative(np.array([ep.T_c, ep.T_e]))
        mass = cum[1] - cum[0]
        counts = np.array([np.sum(sims[f"{ep.task_id}_r{r}"] > ep.T_c) for r in range(20)])
        assert abs(counts.mean() - mass) <= 3 * np.sqrt(mass / 20)
    # the simulated file ingests under the same schema
    splits = {t: "train" for t in sims}
    data.write_splits_csv(tmp_path / "splits.csv", splits)
    data.DatasetManifest("a.csv", "splits.csv").save(tmp_path / "m.txt")
    again = data.ingest(data.DatasetManifest.load(tmp_path / "m.txt"))
    assert len(again.episodes["train"]) + len(again.excluded) == len(sims)


def test_simulate_from_spec(synth, tmp_path):
    spec = str(synth / "spec.txt")
    assert cli.main(["simulate", "--spec", spec, "--replicates", "2", "--out", str(tmp_path / "s.csv")]) == 0
    assert len(data.read_events_csv(tmp_path / "s.csv")) == 80


def test_exit_codes(trained, tmp_path, monkeypatch):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 1
    assert cli.main(["simulate", "--out", str(tmp_path / "x.csv")]) == 1
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("manifest = m.txt\nlearning_rate = 0.1\n")
    assert cli.main(["train", "--config", str(bad)]) == 2

    def boom(*a, **k):
        from metatpp.evalsim import BoundViolation
        raise BoundViolation("intensity 9 exceeds bound 1 at t=13.5")

    monkeypatch.setattr(cli, "thinning_sample", boom)
    assert cli.main(["simulate", "--checkpoint", str(trained / "run" / "checkpoint.bin"), "--manifest",
                     str(trained / "ds" / "manifest.txt"), "--out", str(tmp_path / "y.csv")]) == 3


def test_run_config_validation(tmp_path):
    cfg = tmp_path / "r.cfg"
    cfg.write_text("manifest = m.txt\nmodel = maml\n")
    with pytest.raises(data.DataError, match="model"):
        cli.RunConfig.load(cfg)
    cfg.write_text("manifest = m.txt\nlr = -1\n")
    with pytest.raises(data.DataError, match="lr"):
        cli.RunConfig.load(cfg)
    cfg.write_text("manifest = m.txt\nuse_periodic = false\nperiods_extra = 1\n")
    with pytest.raises(data.DataError, match="unknown keys"):
        cli.RunConfig.load(cfg)
