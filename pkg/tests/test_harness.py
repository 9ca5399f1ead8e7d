import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from singular_trajectory import diffusion as dm
from singular_trajectory.dataset import SCENES, TaskSpec, make_split
from singular_trajectory.errors import CheckpointError, ConfigError, ShapeError
from singular_trajectory.harness import cli, report, synthetic
from singular_trajectory.harness.metrics import ade_fde, displacement_errors
from singular_trajectory.harness.predictors import (ConstantVelocity, PredictorHandle, PredictorKind,
                                                    constant_velocity_baseline)
from singular_trajectory.harness.protocol import (AVG, Corpus, EvalResult, average, run_protocol, run_split,
                                                  with_averages)

from oracles import exhaustive_min_ade_fde

TINY = dm.TrainConfig(epochs=2, batch_size=128, d_model=16, n_heads=2, num_steps=5)
SMALL = synthetic.SceneParams(num_agents=30, num_frames=120)


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    return synthetic.write_corpus(tmp_path_factory.mktemp("synth"), seed=0, params=SMALL)


@pytest.fixture(scope="module")
def linear_corpus(tmp_path_factory):
    params = synthetic.SceneParams(num_agents=25, num_frames=120, turn_fraction=0.0, noise=0.0)
    return Corpus.from_registry(synthetic.write_corpus(tmp_path_factory.mktemp("linear"), seed=1, params=params))


# --- metrics ------------------------------------------------------------------

def test_identity_prediction_scores_zero():
    gt = np.random.default_rng(0).normal(size=(3, 12, 2))
    assert ade_fde(gt[:, None], gt) == (0.0, 0.0)


def test_perpendicular_offset_of_one_metre():
    gt = np.stack([np.arange(12.0), np.zeros(12)], axis=1)[None]
    pred = (gt + np.array([0.0, 1.0]))[:, None]
    assert ade_fde(pred, gt) == pytest.approx((1.0, 1.0), abs=1e-15)


def test_handcrafted_grid_matches_exhaustive_oracle():
    gt = np.stack([np.stack([np.arange(12.0), np.zeros(12)], 1), np.stack([np.zeros(12), np.arange(12.0)], 1)])
    offsets = np.array([[0.0, 0.5], [1.0, -1.0], [-0.25, 0.0]])
    ramp = np.linspace(0, 1, 12)[:, None]
    pred = np.stack([[g + o * ramp * (s + 1) for s, o in enumerate(offsets)] for g in gt])
    assert ade_fde(pred, gt) == pytest.approx(exhaustive_min_ade_fde(pred, gt), abs=1e-12)


@given(pred=arrays(np.float64, (3, 4, 5, 2), elements=st.floats(-5, 5)),
       gt=arrays(np.float64, (3, 5, 2), elements=st.floats(-5, 5)))
@settings(max_examples=60, deadline=None)
def test_metric_matches_oracle_and_min_over_samples_is_monotone(pred, gt):
    full = ade_fde(pred, gt)
    assert full == pytest.approx(exhaustive_min_ade_fde(pred, gt), abs=1e-9)
    fewer = ade_fde(pred[:, :3], gt)
    assert full[0] <= fewer[0] + 1e-12 and full[1] <= fewer[1] + 1e-12
    assert full[0] >= 0 and full[1] >= 0


def test_single_sample_reduction():
    rng = np.random.default_rng(1)
    gt, pred = rng.normal(size=(4, 12, 2)), rng.normal(size=(4, 12, 2))
    ade, fde = displacement_errors(pred[:, None], gt)
    d = np.linalg.norm(pred - gt, axis=-1)
    assert ade_fde(pred[:, None], gt) == pytest.approx((d.mean(), d[:, -1].mean()), abs=1e-12)
    np.testing.assert_allclose(ade[:, 0], d.mean(axis=1))


def test_metric_shape_errors():
    with pytest.raises(ShapeError):
        ade_fde(np.zeros((2, 1, 12, 2)), np.zeros((2, 11, 2)))
    with pytest.raises(ShapeError):
        ade_fde(np.zeros((0, 1, 12, 2)), np.zeros((0, 12, 2)))


# --- constant-velocity baseline ------------------------------------------------------

def test_cv_stationary_and_linear():
    still = np.full((1, 8, 2), 3.0)
    np.testing.assert_array_equal(constant_velocity_baseline(still, 12, 20), np.full((1, 20, 12, 2), 3.0))
    line = np.stack([np.arange(8.0), np.zeros(8)], 1)[None]
    out = constant_velocity_baseline(line)
    np.testing.assert_allclose(out[0, 0], np.stack([np.arange(8.0, 20.0), np.zeros(12)], 1))


def test_cv_two_frame_history_equals_full_history_on_lines():
    line = np.stack([np.arange(8.0) * 0.3, np.arange(8.0) * -0.2], 1)[None]
    np.testing.assert_allclose(constant_velocity_baseline(line[:, -2:]), constant_velocity_baseline(line))
    with pytest.raises(ValueError):
        constant_velocity_baseline(line[:, -1:])


@pytest.mark.parametrize("task", ["stochastic", "deterministic", "momentary", "few_shot"])
def test_cv_is_exact_on_linear_synthetic_data(task, linear_corpus):
    results = run_protocol(task, PredictorHandle("constant_velocity"), linear_corpus)
    for r in results:
        assert r.ade < 1e-3 and r.fde < 1e-3, r


def test_cv_is_exact_on_linear_data_across_domains(linear_corpus):
    results = run_protocol("domain_adaptation", PredictorHandle("constant_velocity"), linear_corpus)
    assert max(r.ade for r in results) < 1e-3 and max(r.fde for r in results) < 1e-3


# --- protocol -------------------------------------------------------------------------

def test_stochastic_protocol_rows(corpus_path):
    results = run_protocol("stochastic", PredictorHandle("constant_velocity"), corpus_path)
    assert [r.scene for r in results] == list(SCENES) + [AVG]
    assert all(r.num_samples == 20 for r in results)
    assert results[-1].ade == pytest.approx(np.mean([r.ade for r in results[:-1]]))


def test_domain_adaptation_protocol_rows(corpus_path):
    results = run_protocol("domain_adaptation", PredictorHandle("nearest_anchor", {"k": 4}), corpus_path)
    pairs = [r for r in results if not r.is_average]
    groups = [r for r in results if r.scene.endswith("2*")]
    assert len(pairs) == 20 and len(groups) == 5 and len(pairs) + len(groups) == 25
    assert results[-1].scene == AVG and len(results) == 26
    assert [r.scene for r in results[:5]] == ["A2B", "A2C", "A2D", "A2E", "A2*"]
    assert all(r.num_samples == 1 for r in results)


def test_few_shot_split_keeps_floor_of_a_tenth(corpus_path):
    corpus = Corpus.from_registry(corpus_path)
    full_spec = TaskSpec.for_task("stochastic", "ZARA1")
    few_spec = TaskSpec.for_task("few_shot", "ZARA1")
    names = full_spec.train_scenes + full_spec.test_scenes
    full, test_a = make_split(full_spec, corpus.windows(full_spec, names))
    few, test_b = make_split(few_spec, corpus.windows(few_spec, names), seed=3)
    assert len(few) == len(full) // 10
    assert len(test_a) == len(test_b)


def test_momentary_split_uses_two_frame_histories(corpus_path):
    spec = TaskSpec.for_task("momentary", "ETH")
    result, test, pred = run_split(spec, PredictorHandle("constant_velocity"), Corpus.from_registry(corpus_path))
    assert all(w.hist.shape == (2, 2) for w in test) and pred.shape == (len(test), 20, 12, 2)
    assert result.count == len(test)


def test_protocol_is_deterministic(corpus_path):
    spec = TaskSpec.for_task("stochastic", "HOTEL")
    handle = PredictorHandle("singular_trajectory", {"config": TINY})
    a, _, pa = run_split(spec, handle, Corpus.from_registry(corpus_path), seed=4)
    b, _, pb = run_split(spec, handle, Corpus.from_registry(corpus_path), seed=4)
    assert a == b
    np.testing.assert_array_equal(pa, pb)


def test_checkpoints_are_written_then_reused(corpus_path, tmp_path):
    spec = TaskSpec.for_task("deterministic", "UNIV")
    handle = PredictorHandle("singular_trajectory", {"config": TINY})
    corpus = Corpus.from_registry(corpus_path)
    first, _, _ = run_split(spec, handle, corpus, checkpoint_dir=tmp_path)
    assert (tmp_path / "deterministic_UNIV.pt").exists()
    again, _, _ = run_split(spec, handle, corpus, checkpoint_dir=tmp_path, eval_only=True)
    assert again == first


def test_eval_only_without_checkpoint_fails(corpus_path, tmp_path):
    spec = TaskSpec.for_task("stochastic", "ETH")
    handle = PredictorHandle("singular_trajectory", {"config": TINY})
    with pytest.raises(CheckpointError):
        run_split(spec, handle, Corpus.from_registry(corpus_path), checkpoint_dir=tmp_path, eval_only=True)
    with pytest.raises(CheckpointError):
        run_split(spec, handle, Corpus.from_registry(corpus_path), eval_only=True)


def test_unknown_predictor_and_missing_scene(tmp_path):
    with pytest.raises(ConfigError):
        PredictorHandle("oracle")
    with pytest.raises(ConfigError):
        Corpus({}).records("ETH")


def test_eval_result_invariants_and_roundtrip():
    with pytest.raises(ValueError):
        EvalResult("stochastic", "ETH", -0.1, 0.2, 20, 3, "h", "m")
    with pytest.raises(ValueError):
        EvalResult("stochastic", "ETH", float("nan"), 0.2, 20, 3, "h", "m")
    r = EvalResult("stochastic", "ETH", 0.5, 0.9, 20, 3, "h", "m")
    assert EvalResult.from_dict(r.to_dict()) == r
    avg = average([r, EvalResult("stochastic", "HOTEL", 0.1, 0.3, 20, 5, "h", "m")])
    assert (avg.scene, avg.ade, avg.fde, avg.count) == (AVG, pytest.approx(0.3), pytest.approx(0.6), 8)
    assert avg.is_average and not r.is_average
    assert [x.scene for x in with_averages("stochastic", [r])] == ["ETH", AVG]


# --- report ---------------------------------------------------------------------------

def _rows(task="stochastic", model="cv"):
    scenes = [s for s in report.scene_columns(task) if s != AVG and not s.endswith("2*")]
    rows = [EvalResult(task, s, 0.1 * (i + 1), 0.2 * (i + 1), 20, 10, "h", model) for i, s in enumerate(scenes)]
    return with_averages(task, rows)


def test_one_result_gives_one_row_csv(tmp_path):
    r = EvalResult("stochastic", "ETH", 0.5, 0.9, 20, 3, "h", "m")
    path = report.write_csv([r], tmp_path / "r.csv")
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",") == list(report.CSV_FIELDS) and len(lines) == 2
    assert report.read_csv(path) == [r]


def test_markdown_column_order():
    md = report.markdown_table(_rows() + _rows(model="other"))
    header = [l for l in md.splitlines() if l.startswith("| Model")][0]
    assert [c.strip() for c in header.strip("|").split("|")] == ["Model", "ETH", "HOTEL", "UNIV", "ZARA1",
                                                                 "ZARA2", "AVG"]
    assert "| cv | 0.10 / 0.20 |" in md and md.count("\n| other |") == 1
    da = report.markdown_table(_rows("domain_adaptation"))
    cols = [l for l in da.splitlines() if l.startswith("| Model")][0]
    assert cols.count("2*") == 5 and cols.strip().endswith("AVG |")


def test_report_errors(tmp_path):
    with pytest.raises(ValueError):
        report.write_report([], tmp_path)
    with pytest.raises(ConfigError):
        report.write_report(_rows(), tmp_path, formats=["xlsx"])


def test_report_files_and_plots(tmp_path, corpus_path):
    paths = report.write_report(_rows(), tmp_path, stem="x")
    assert sorted(p.name for p in paths) == ["x.csv", "x.json", "x.md"]
    assert len(json.loads((tmp_path / "x.json").read_text())) == 6
    report.plot_summary(tmp_path / "summary.png", _rows())
    spec = TaskSpec.for_task("stochastic", "ETH")
    corpus = Corpus.from_registry(corpus_path)
    _, test = make_split(spec, corpus.windows(spec, SCENES))
    pred = ConstantVelocity(spec).predict(test)
    report.plot_predictions(tmp_path / "pred.png", test, pred, corpus.field("ETH").tmap, title="ETH")
    for name in ("summary.png", "pred.png"):
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_ablation_table_shape():
    rows = [(f"K={k}", EvalResult("stochastic", AVG, 0.5 / k, 1.0 / k, 20, 10, "h", "m")) for k in (1, 2)]
    table = report.ablation_table(rows, "K")
    lines = table.strip().splitlines()
    assert lines[0] == "| K | Stochastic | Average |" and len(lines) == 4
    assert lines[2] == "| K=1 | 0.50 / 1.00 | 0.50 / 1.00 |"


# --- CLI ------------------------------------------------------------------------------

def test_config_loading(tmp_path):
    cfg = cli.load_config('{"epochs": 3}', desk_scale=True, seed=5)
    assert cfg.epochs == 3 and cfg.seed == 5 and cfg.d_model == cli.DESK_SCALE["d_model"]
    (tmp_path / "c.json").write_text('{"k": 2}')
    assert cli.load_config(str(tmp_path / "c.json"), False, 0).k == 2
    with pytest.raises(ConfigError):
        cli.load_config("{not json", False, 0)
    with pytest.raises(ConfigError):
        cli.load_config("[1]", False, 0)
    with pytest.raises(ConfigError):
        cli.load_config(str(tmp_path / "missing.json"), False, 0)


def test_cli_end_to_end(tmp_path):
    tiny = json.dumps({**TINY.to_dict(), "extra": {}})
    reg = tmp_path / "data" / "registry.json"
    assert cli.main(["synth", "--out-dir", str(tmp_path / "data"), "--agents", "25"]) == 0
    assert reg.exists()
    out = tmp_path / "run"
    common = ["--registry", str(reg), "--out-dir", str(out)]
    assert cli.main(["build-space", *common, "--scene", "ETH"]) == 0
    assert (out / "space_stochastic_ETH.json").exists()

    assert cli.main(["evaluate", *common, "--model", "constant_velocity", "--scene", "ETH"]) == 0
    for name in ("results_stochastic.csv", "results_stochastic.md", "results_stochastic.json",
                 "summary_stochastic.png", "plots/stochastic_ETH.png", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert {"seed", "config", "git_hash", "deviations", "command"} <= set(manifest)

    ckpt = out / "m.pt"
    assert cli.main(["train", *common, "--scene", "ETH", "--config", tiny, "--checkpoint", str(ckpt)]) == 0
    assert cli.main(["predict", *common, "--scene", "ETH", "--checkpoint", str(ckpt)]) == 0
    lines = (out / "predictions_stochastic_ETH.csv").read_text().splitlines()
    assert lines[0] == "scene,ped_id,start_frame,sample,step,x,y" and (len(lines) - 1) % (20 * 12) == 0

    rep = tmp_path / "rep"
    assert cli.main(["report", "--results", str(out / "results_stochastic.csv"), "--out-dir", str(rep),
                     "--format", "md"]) == 0
    assert (rep / "report.md").exists() and not (rep / "report.csv").exists()
    assert (rep / "report_summary.png").exists()

    assert cli.main(["ablate", *common, "--scene", "ETH", "--config", tiny, "--axis", "M",
                     "--values", "1,2"]) == 0
    assert "| M=1 |" in (out / "ablation.md").read_text()


def test_cli_errors_return_two(tmp_path, corpus_path):
    assert cli.main(["predict", "--registry", str(corpus_path), "--scene", "ETH",
                     "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["train", "--registry", str(corpus_path), "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["evaluate", "--registry", str(corpus_path), "--out-dir", str(tmp_path),
                     "--checkpoint", str(tmp_path / "none"), "--scene", "ETH"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["ablate", "--registry", str(corpus_path), "--axis", "Q"])
