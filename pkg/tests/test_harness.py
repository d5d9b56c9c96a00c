import json
import math

import numpy as np
import pytest

from demon_dnc import cli, dnc, tasks
from demon_dnc import diffcore as dc
from demon_dnc.dnc import DncConfig
from demon_dnc.harness import checkpoint as ckpt
from demon_dnc.harness import trainer as tr
from demon_dnc.harness.compare import compare, spearman
from demon_dnc.harness.config import ExperimentConfig, MineConfig, load_config, repeat_copy_desk, save_config
from demon_dnc.tasks import TaskConfig


def tiny(demon=False, seed=0, kind="copy", **kw) -> ExperimentConfig:
    task = TaskConfig(kind=kind, bits=3, min_length=1, max_length=3, max_repeats=2)
    ind, outd = task.dims()
    cfg = ExperimentConfig(
        dnc=DncConfig(input_dim=ind, output_dim=outd, N=4, W=4, R=1, hidden=12, mask=True),
        task=task, mine=MineConfig(hidden=[8, 8], warmup=20), demon_enabled=demon, seed=seed,
        steps=8, batch_size=3, log_interval=2, eval_interval=4, eval_samples=6, checkpoint_interval=4,
        dtype="float64",
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()


def metrics_lines(run_dir):
    return [json.loads(ln) for ln in (run_dir / tr.METRICS_FILE).read_text().splitlines()]


def strip_clock(rows):
    return [{k: v for k, v in r.items() if k != "wall_clock"} for r in rows]


# --- config --------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = repeat_copy_desk(demon=True, seed=7)
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.digest() == cfg.digest()
    assert back.variant == "DNC-M-Demon"


def test_config_rejects_unknown_and_bad_values():
    d = repeat_copy_desk().to_dict()
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**d, "bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**d, "dnc": {**d["dnc"], "bogus": 1}})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**d, "schema": 99})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**d, "dnc": {**d["dnc"], "input_dim": 3}}).validate()
    with pytest.raises(ValueError):
        tiny(log_interval=3)


def test_config_digest_tracks_content():
    a, b = repeat_copy_desk(seed=0), repeat_copy_desk(seed=0)
    assert a.digest() == b.digest() and len(a.digest()) == 32
    assert a.digest() != repeat_copy_desk(seed=1).digest()
    assert a.digest() != repeat_copy_desk(demon=True).digest()


# --- checkpoint format -------------------------------------------------------

def test_checkpoint_encode_decode_layout():
    rec = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([7], dtype=np.uint32),
           "c": np.array(2.5)}
    blob = ckpt.encode(rec, b"\x01" * 32)
    assert blob[:8] == b"DEMONDNC"
    assert int.from_bytes(blob[8:12], "little") == ckpt.VERSION
    assert blob[12:44] == b"\x01" * 32
    assert int.from_bytes(blob[44:48], "little") == 3
    # first record: name length, name, dtype code, rank, extents
    assert int.from_bytes(blob[48:52], "little") == 1 and blob[52:53] == b"a"
    assert blob[53] == 0 and int.from_bytes(blob[54:58], "little") == 2
    digest, back = ckpt.decode(blob)
    assert digest == b"\x01" * 32 and list(back) == ["a", "b", "c"]
    for k in rec:
        np.testing.assert_array_equal(back[k], rec[k])
    assert back["c"].dtype == np.float64 and back["c"].shape == ()


def test_checkpoint_corruption_errors():
    blob = ckpt.encode({"a": np.zeros(4, dtype=np.float32)}, bytes(32))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(blob[:-3])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(blob + b"\0")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.encode({"a": np.zeros(2, dtype=np.int16)}, bytes(32))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.encode({}, bytes(5))


def test_rng_words_round_trip():
    rng = np.random.default_rng(123)
    rng.random(7)
    rng.integers(0, 10, dtype=np.uint32)  # leaves a buffered half-word
    words = ckpt.rng_to_words(rng)
    assert words.dtype == np.uint32 and words.shape == (10,)
    clone = ckpt.words_to_rng(words)
    assert np.array_equal(rng.random(5), clone.random(5))
    assert ckpt.words_u64(ckpt.u64_words(2 ** 63 + 5)) == 2 ** 63 + 5


def test_trainer_checkpoint_byte_identical_and_digest(tmp_path):
    t = tr.Trainer(tiny(demon=True))
    for _ in range(3):
        t.training_step()
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    t.save_checkpoint(p1)
    u = tr.Trainer(tiny(demon=True))
    u.load_checkpoint(p1)
    u.save_checkpoint(p2)
    assert p1.read_bytes() == p2.read_bytes()
    with pytest.raises(ckpt.CheckpointError):
        tr.Trainer(tiny(demon=True, seed=1)).load_checkpoint(p1)


# --- trainer -------------------------------------------------------------------

def test_snapshot_times_count():
    for T in range(1, 30):
        for k in (1, 2, 3, 7):
            assert len(tr.snapshot_times(T, k)) == max(0, math.ceil((T - 1) / k))


def test_pair_counter_and_heldout_split():
    cfg = tiny(demon=True, snapshot_stride=2)
    t = tr.Trainer(cfg)
    samples = [t.data.sample(np.random.default_rng(i)) for i in range(3)]
    before = t.mine.updates
    t.training_step(samples)
    expected = sum(len(tr.snapshot_times(s.length, 2)) for s in samples)
    assert t.pair_counter == expected
    assert t.mine.updates == before + cfg.mine.updates_per_batch


def test_training_step_smoke_and_logs():
    t = tr.Trainer(tiny(demon=True))
    steps = [t.training_step()["step"] for _ in range(10)]
    assert steps == list(range(1, 11))
    rec = t.training_step()
    for k in ("task_loss", "error", "grad_norm", "mine_loss", "demon_reward_mean",
              "clip_frac", "mean_ratio", "policy_loss", "value_loss"):
        assert k in rec and math.isfinite(rec[k]), k
    # a tiny batch may hold fewer than two held-out pairs; the estimate is then NaN, not stale
    assert "mi_estimate" in rec
    big = tr.Trainer(tiny(demon=True, batch_size=16))
    assert math.isfinite(big.training_step()["mi_estimate"])


def test_demon_does_not_touch_other_stores():
    # with demon on, the PPO step may only move policy/value; DNC gradients never reach them
    t = tr.Trainer(tiny(demon=True))
    snap = {p: {k: v.data.copy() for k, v in s.items()} for p, s in t.stores()}
    t.training_step()
    assert any(not np.array_equal(v.data, snap["policy"][k]) for k, v in t.policy.params.items())
    assert any(not np.array_equal(v.data, snap["dnc"][k]) for k, v in t.params.items())
    # the policy gets no gradient from the task loss
    t.params.zero_grad()
    t.policy.params.zero_grad()
    x, y, m, lengths = tasks.pad_batch([t.data.sample(np.random.default_rng(0))])
    logits, _, _ = t.rollout(x, lengths, np.random.default_rng(1))
    dc.backward(t.task_loss(logits, y, m))
    for k, p in t.policy.params.items():
        assert p.grad is None or np.all(p.grad == 0), k


def test_baseline_has_no_demon_metrics():
    rec = tr.Trainer(tiny()).training_step()
    assert "mi_estimate" not in rec


def test_nonfinite_loss_aborts_with_record(tmp_path, monkeypatch):
    cfg = tiny()

    def broken(self, logits, y, m):
        return dc.constant(float("nan"))

    monkeypatch.setattr(tr.Trainer, "task_loss", broken)
    with pytest.raises(tr.TrainingAborted):
        tr.train(cfg, tmp_path)
    last = metrics_lines(tmp_path)[-1]
    assert last["kind"] == "abort" and last["step"] == 1


# --- train / determinism / resume ---------------------------------------------

def test_train_writes_metrics_summary_and_checkpoint(tmp_path):
    summary = tr.train(tiny(demon=True), tmp_path)
    rows = metrics_lines(tmp_path)
    metrics = [r for r in rows if r["kind"] == "metrics"]
    assert [r["step"] for r in metrics] == [2, 4, 6, 8]
    assert all("mi_estimate" in r and "demon_reward_mean" in r for r in metrics)
    assert "eval_error" in metrics[1] and "eval_error" not in metrics[0]
    assert rows[-1] == json.loads(json.dumps(summary)) and summary["steps"] == 8
    assert (tmp_path / tr.CHECKPOINT_FILE).exists() and (tmp_path / tr.CONFIG_FILE).exists()
    cfg, recs, summ = tr.load_run(tmp_path)
    assert cfg == tiny(demon=True) and len(recs) == 4 and summ["kind"] == "summary"


def test_early_stop_on_target(tmp_path):
    summary = tr.train(tiny(target_error=1.0), tmp_path)
    assert summary["reached_target_at"] == 4 and summary["steps"] == 4


@pytest.mark.parametrize("demon", [False, True])
def test_runs_are_bit_identical(tmp_path, demon):
    tr.train(tiny(demon=demon, seed=3), tmp_path / "a")
    tr.train(tiny(demon=demon, seed=3), tmp_path / "b")
    assert strip_clock(metrics_lines(tmp_path / "a")) == strip_clock(metrics_lines(tmp_path / "b"))
    assert (tmp_path / "a" / tr.CHECKPOINT_FILE).read_bytes() == (tmp_path / "b" / tr.CHECKPOINT_FILE).read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny(demon=True, seed=5)
    tr.train(cfg, tmp_path / "full")
    tr.train(cfg, tmp_path / "cut", max_steps=4)
    tr.train(cfg, tmp_path / "cut", resume=True)
    assert strip_clock(metrics_lines(tmp_path / "full")) == strip_clock(metrics_lines(tmp_path / "cut"))


def test_resume_next_step_identical(tmp_path):
    t = tr.Trainer(tiny(demon=True, seed=2))
    for _ in range(3):
        t.training_step()
    t.save_checkpoint(tmp_path / "c.bin")
    u = tr.Trainer(tiny(demon=True, seed=2))
    u.load_checkpoint(tmp_path / "c.bin")
    assert tr._json_line(t.training_step()) == tr._json_line(u.training_step())


# --- evaluation ----------------------------------------------------------------

def test_evaluate_repeatable_and_untrained_chance():
    cfg = tiny()
    cfg.eval_samples = 64
    t = tr.Trainer(cfg)
    a, b = t.evaluate(64, seed=9), t.evaluate(64, seed=9)
    assert a == b and a["n"] == 64
    assert abs(a["error_mean"] - 0.5) < 0.1
    with pytest.raises(ValueError):
        t.evaluate(0, seed=1)


def test_evaluate_checkpoint(tmp_path):
    tr.train(tiny(), tmp_path)
    res = tr.evaluate_checkpoint(tmp_path / tr.CHECKPOINT_FILE, "copy", 5, 1)
    assert res["n"] == 5 and res["step"] == 8 and 0.0 <= res["error_mean"] <= 1.0
    other = tmp_path / "other.json"
    save_config(tiny(seed=4), other)
    with pytest.raises(ckpt.CheckpointError):
        tr.evaluate_checkpoint(tmp_path / tr.CHECKPOINT_FILE, "copy", 5, 1, config_path=other)
    with pytest.raises(ValueError):
        tr.evaluate_checkpoint(tmp_path / tr.CHECKPOINT_FILE, "repeat_copy", 5, 1)
    # same dims: a copy-trained model can be scored on associative recall
    assert tr.evaluate_checkpoint(tmp_path / tr.CHECKPOINT_FILE, "associative_recall", 5, 1)["n"] == 5


# --- compare -------------------------------------------------------------------

def test_compare_identical_runs_zero_std(tmp_path):
    for name in ("a", "b"):
        tr.train(tiny(demon=True), tmp_path / name)
    res = compare([tmp_path / "a", tmp_path / "b"])
    assert res.steps == [2, 4, 6, 8]
    assert len(res.rows) == len(res.steps)
    for col, vals in zip(res.columns, zip(*res.rows)):
        if col.endswith(":std"):
            assert all(v == 0.0 or math.isnan(v) for v in vals), col
    text = res.to_text()
    assert text.splitlines()[-1].startswith("spearman_final_mi_vs_error")


def test_compare_missing_files(tmp_path):
    tr.train(tiny(), tmp_path / "a")
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        compare([tmp_path / "a", tmp_path / "empty"])
    with pytest.raises(ValueError):
        compare([tmp_path / "a"])


def test_spearman_against_scipy():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(3, 20))
        x = rng.integers(0, 5, size=n).astype(float)   # plenty of ties
        y = rng.normal(size=n)
        if np.all(x == x[0]):
            continue
        assert abs(spearman(x, y) - stats.spearmanr(x, y)[0]) < 1e-9
    assert math.isnan(spearman([1.0], [2.0]))
    assert math.isnan(spearman([1.0, 1.0], [2.0, 3.0]))


# --- CLI -----------------------------------------------------------------------

def test_cli_train_eval_compare(tmp_path, capsys):
    save_config(tiny(demon=True), tmp_path / "c.json")
    for seed in (0, 1):
        assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--seed", str(seed),
                         "--out", str(tmp_path / f"r{seed}"), "--steps", "4"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert json.loads(out[-1])["steps"] == 4
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "r0" / tr.CHECKPOINT_FILE), "--task", "copy",
                     "--n", "4", "--seed", "0"]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 4
    assert cli.main(["compare", str(tmp_path / "r0"), str(tmp_path / "r1"), "--out", str(tmp_path / "cmp.tsv")]) == 0
    assert (tmp_path / "cmp.tsv").read_text() == capsys.readouterr().out


def test_cli_errors_are_json(tmp_path, capsys):
    tr.train(tiny(), tmp_path / "r")
    rc = cli.main(["eval", "--checkpoint", str(tmp_path / "r" / tr.CHECKPOINT_FILE), "--task", "copy",
                   "--n", "0", "--seed", "0"])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ValueError"
    assert cli.main(["compare", str(tmp_path / "r"), str(tmp_path / "nope")]) == 1
    with pytest.raises(SystemExit):
        cli.main(["train", "--config", "x", "--seed", "-1", "--out", "y"])


def test_cli_init_config(tmp_path, qa1_dir):
    assert cli.main(["init-config", "--preset", "repeat-copy", "--demon", "--out", str(tmp_path / "a.json")]) == 0
    assert load_config(tmp_path / "a.json") == repeat_copy_desk(demon=True)
    assert cli.main(["init-config", "--preset", "babi", "--babi-dir", str(qa1_dir), "--out", str(tmp_path / "b.json")]) == 0
    assert load_config(tmp_path / "b.json").task.kind == "babi"
    assert cli.main(["init-config", "--preset", "babi", "--out", str(tmp_path / "c.json")]) == 1


def test_cli_grad_check_single_seed(capsys):
    assert cli.main(["grad-check", "--seeds", "1"]) == 0
    assert "False" not in capsys.readouterr().out


# --- bAbI ----------------------------------------------------------------------

def babi_cfg(d, **kw):
    task = TaskConfig(kind="babi", babi_dir=str(d), babi_tasks=[1], babi_max_stories=20)
    V = len(tr.load_babi(task).vocab)
    cfg = ExperimentConfig(dnc=DncConfig(input_dim=V, output_dim=V, N=8, W=8, R=1, hidden=24, mask=True),
                           task=task, steps=6, batch_size=4, log_interval=2, eval_interval=2,
                           eval_samples=8, checkpoint_interval=2)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()


def test_babi_training_smoke(tmp_path, qa1_dir):
    for demon in (False, True):
        summary = tr.train(babi_cfg(qa1_dir, demon_enabled=demon), tmp_path / str(demon))
        assert summary["steps"] == 6 and 0.0 <= summary["eval_error_mean"] <= 1.0


def test_babi_vocab_mismatch(qa1_dir):
    cfg = babi_cfg(qa1_dir)
    cfg.dnc = DncConfig(input_dim=5, output_dim=5)
    with pytest.raises(dnc.ConfigError):
        tr.Trainer(cfg)
