import csv
import io

import numpy as np
import pytest

from fitv2.checkpoint import load_checkpoint
from fitv2.cli import main
from fitv2.evaluate import evaluate_generator, oracle_generator
from fitv2.pipeline import DatasetSpec, position_map, read_dataset
from fitv2.positional import scale_factors

SMALL = [
    "--set", "model.layers=1",
    "--set", "model.hidden=32",
    "--set", "data.num_samples=32",
    "--set", "train.batch=4",
    "--set", "train.warmup=2",
    "--set", "flow.steps=4",
]


def train(out, steps=4, every=2, extra=()):
    args = ["train", *SMALL, "--set", f"train.steps={steps}", "--set", f"train.checkpoint_every={every}"]
    return main([*args, "--out", str(out), "--deterministic", *extra])


def read_losses(path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return [float(r["loss"]) for r in rows]


def read_meta(path):
    out = {}
    for line in path.read_text().splitlines():
        k, _, v = line.partition(" = ")
        out[k] = v
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert train(out, steps=6, every=3) == 0
    return out


def test_train_writes_artifacts(run_dir):
    assert (run_dir / "checkpoint" / "manifest").exists()
    assert (run_dir / "checkpoints" / "step_000003").is_dir()
    assert (run_dir / "checkpoints" / "step_000006").is_dir()
    assert "model.hidden = 32" in (run_dir / "config.txt").read_text()
    with open(run_dir / "loss.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "loss", "lr"]
    assert [int(r[0]) for r in rows[1:]] == list(range(6))


def test_same_seed_identical_traces(run_dir, tmp_path):
    assert train(tmp_path, steps=6, every=3) == 0
    assert read_losses(tmp_path / "loss.csv") == read_losses(run_dir / "loss.csv")


def test_different_seed_differs(run_dir, tmp_path):
    assert train(tmp_path, steps=6, every=3, extra=["--seed", "9"]) == 0
    assert read_losses(tmp_path / "loss.csv") != read_losses(run_dir / "loss.csv")


def test_resume_matches_uninterrupted(run_dir, tmp_path):
    mid = run_dir / "checkpoints" / "step_000003"
    assert train(tmp_path, steps=6, every=3, extra=["--resume", str(mid)]) == 0
    a = np.array(read_losses(tmp_path / "loss.csv"))
    b = np.array(read_losses(run_dir / "loss.csv"))
    assert a.shape == b.shape
    assert np.max(np.abs(a - b)) <= 1e-6
    ra = load_checkpoint(tmp_path / "checkpoint").model.params
    rb = load_checkpoint(run_dir / "checkpoint").model.params
    for k in rb:
        assert np.max(np.abs(ra[k].data - rb[k].data)) <= 1e-6, k


def test_resume_mismatch_refused_with_diff(run_dir, tmp_path, capsys):
    mid = run_dir / "checkpoints" / "step_000003"
    rc = train(tmp_path, steps=6, every=3, extra=["--resume", str(mid), "--set", "train.lr=0.5"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "train.lr" in err and "0.5" in err


def test_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "no_such_data"
    assert train(tmp_path / "o", extra=["--set", f"data.path={missing}"]) == 3
    assert str(missing) in capsys.readouterr().err


def test_dataset_from_disk(tmp_path):
    from fitv2.pipeline import synth_dataset, write_dataset

    write_dataset(tmp_path / "data", synth_dataset(DatasetSpec(num_samples=16, seed=2)))
    assert train(tmp_path / "o", extra=["--set", f"data.path={tmp_path / 'data'}"]) == 0


def test_unknown_key_is_config_error(tmp_path, capsys):
    assert main(["train", "--set", "model.depth=3", "--out", str(tmp_path)]) == 2
    assert "model.depth" in capsys.readouterr().err


def test_bad_value_is_config_error(tmp_path):
    assert main(["train", "--set", "model.hidden=-1", "--out", str(tmp_path)]) == 2
    assert main(["train", "--set", "flow.ode=leapfrog", "--out", str(tmp_path)]) == 2


def test_config_file_round_trip(run_dir, tmp_path):
    rc = main(["train", "--config", str(run_dir / "config.txt"), "--out", str(tmp_path), "--deterministic"])
    assert rc == 0
    assert read_losses(tmp_path / "loss.csv") == read_losses(run_dir / "loss.csv")


def test_divergence_is_numeric_failure(tmp_path):
    with np.errstate(all="ignore"):
        assert train(tmp_path, extra=["--set", "train.lr=1e30"]) == 4


def test_missing_checkpoint_is_data_error(tmp_path):
    rc = main(["sample", "--checkpoint", str(tmp_path / "none"), "--height", "8", "--width", "8", "--out", str(tmp_path)])
    assert rc == 3


def sample(run_dir, out, h, w, *extra):
    args = ["sample", "--checkpoint", str(run_dir / "checkpoint"), "--height", str(h), "--width", str(w)]
    return main([*args, *SMALL, "--n", "2", "--out", str(out), "--deterministic", *extra])


def test_sample_in_budget_positions(run_dir, tmp_path):
    assert sample(run_dir, tmp_path, 8, 16) == 0
    meta = read_meta(tmp_path / "samples" / "meta.txt")
    assert meta["grid"] == "4x8" and meta["method"] == "none"
    pos = [tuple(int(v) for v in p.split(",")) for p in meta["positions"].split(";")]
    assert pos == position_map(4, 8)
    imgs = read_dataset(tmp_path / "samples")
    assert [im.pixels.shape for im in imgs] == [(4, 8, 16)] * 2
    assert [im.label for im in imgs] == [0, 1]


def test_sample_vision_ntk_metadata(run_dir, tmp_path):
    # 8x16 tokens is twice the 64-token budget
    assert sample(run_dir, tmp_path, 16, 32, "--method", "vision_ntk", "--attn-scale") == 0
    meta = read_meta(tmp_path / "samples" / "meta.txt")
    f = scale_factors(8, 16, 8)
    assert float(meta["s_h"]) == f.s_h == 1.0
    assert float(meta["s_w"]) == f.s_w == 2.0
    assert float(meta["s"]) == f.s
    assert meta["method"] == "vision_ntk"
    # ln 2 < 1, so the logit scale stays at 1
    assert float(meta["s_attn"]) == 1.0


def test_sample_over_budget_without_method_warns(run_dir, tmp_path, capsys):
    assert sample(run_dir, tmp_path, 16, 32) == 0
    assert "exceeds the budget" in capsys.readouterr().err


def test_sample_bitwise_deterministic(run_dir, tmp_path):
    assert sample(run_dir, tmp_path / "a", 8, 16, "--ppm") == 0
    assert sample(run_dir, tmp_path / "b", 8, 16, "--ppm") == 0
    for name in ["000000.sample", "000001.sample", "000000.ppm", "meta.txt"]:
        assert (tmp_path / "a" / "samples" / name).read_bytes() == (tmp_path / "b" / "samples" / name).read_bytes()
    assert (tmp_path / "a" / "samples" / "000000.ppm").read_bytes().startswith(b"P6\n16 8\n255\n")


def test_sample_from_persisted_config(run_dir, tmp_path):
    assert sample(run_dir, tmp_path / "a", 8, 8) == 0
    rc = main([
        "sample", "--config", str(tmp_path / "a" / "config.txt"), "--checkpoint", str(run_dir / "checkpoint"),
        "--height", "8", "--width", "8", "--n", "2", "--out", str(tmp_path / "b"), "--deterministic",
    ])
    assert rc == 0
    a = (tmp_path / "a" / "samples" / "000001.sample").read_bytes()
    assert a == (tmp_path / "b" / "samples" / "000001.sample").read_bytes()


def test_sample_rejects_indivisible_size(run_dir, tmp_path):
    assert sample(run_dir, tmp_path, 9, 8) == 2


def test_adapt_command(run_dir, tmp_path, capsys):
    rc = main([
        "adapt", "--from", str(run_dir / "checkpoint"), *SMALL, "--set", "data.num_samples=16",
        "--lmax", "100", "--steps", "3", "--out", str(tmp_path),
    ])
    assert rc == 0
    assert "trainable" in capsys.readouterr().out
    assert (tmp_path / "freeze_plan.txt").read_text().startswith("trainable ")
    ck = load_checkpoint(tmp_path / "checkpoint")
    assert ck.model.config.max_tokens == 100 and ck.state.step == 3


def test_adapt_requires_larger_budget(run_dir, tmp_path):
    assert main(["adapt", "--from", str(run_dir / "checkpoint"), *SMALL, "--lmax", "64", "--out", str(tmp_path)]) == 2


def test_report_presets(capsys):
    assert main(["report"]) == 0
    lines = {line.split()[0]: line.split() for line in capsys.readouterr().out.splitlines()[1:]}
    b, xl, big = lines["B"], lines["XL"], lines["3B"]
    assert b[1:4] == ["15", "768", "12"]
    assert xl[1:4] == ["36", "1152", "16"]
    assert big[1:4] == ["40", "2304", "24"]
    params = {k: int(v[4].replace(",", "")) for k, v in lines.items()}
    assert abs(params["B"] / 128e6 - 1) < 0.05
    assert abs(params["XL"] / 671e6 - 1) < 0.05
    assert abs(params["3B"] / 3e9 - 1) < 0.05
    assert abs(float(b[5]) / 27.3 - 1) < 0.10
    assert abs(float(xl[5]) / 147 - 1) < 0.10
    assert abs(float(big[5]) / 653 - 1) < 0.10


def test_report_custom_config(tmp_path, capsys):
    assert main(["report", "--set", "model.hidden=64", "--set", "model.layers=2"]) == 0
    custom = capsys.readouterr().out.splitlines()[-1].split()
    assert custom[:3] == ["custom", "2", "64"]


def test_eval_csv_contract(tmp_path):
    assert train(tmp_path / "t", steps=0, every=0) == 0
    rc = main([
        "eval", "--checkpoint", str(tmp_path / "t" / "checkpoint"), *SMALL, "--set", "eval.per_class=4",
        "--resolutions", "8x8,8x16", "--out", str(tmp_path / "e"), "--deterministic",
    ])
    assert rc == 0
    rows = list(csv.reader(io.StringIO((tmp_path / "e" / "metrics.csv").read_text())))
    assert rows[0] == ["resolution", "metric", "value"]
    keys = [(r[0], r[1]) for r in rows[1:]]
    assert len(keys) == len(set(keys))
    metrics = {"val_loss", "stat_distance", "stat_floor", "energy_distance", "energy_floor"}
    assert set(keys) == {(res, m) for res in ("8x8", "8x16") for m in metrics}
    assert all(np.isfinite(float(r[2])) for r in rows[1:])


def test_oracle_at_floor_untrained_far_above(tmp_path):
    spec = DatasetSpec(num_samples=32, seed=0)
    oracle = evaluate_generator(oracle_generator(spec), spec, (8, 8), 32, seed=5)
    # oracle and the floor are both reference-vs-reference comparisons
    assert oracle.stat_distance < 2 * oracle.stat_floor
    assert oracle.energy < 2 * oracle.energy_floor + 1e-3

    from fitv2.blocks import FiTv2, ModelConfig
    from fitv2.evaluate import model_generator
    from fitv2.flow import FlowConfig

    untrained = FiTv2(ModelConfig(layers=1, hidden=32, heads=4), seed=0)
    gen = model_generator(untrained, FlowConfig(ode="euler", steps=2))
    noise = evaluate_generator(gen, spec, (8, 8), 32, seed=5)
    assert noise.stat_distance > 5 * noise.stat_floor
    assert noise.energy > 5 * max(noise.energy_floor, 1e-3)
