"""Training loop: supervised DNC update, then MINE, then the demon's PPO step."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from .. import dnc, tasks
from ..demon import (DemonPolicy, RolloutBuffer, RunningMeanStd, ValueNetwork, ppo_update,
                     reward_from_mi, state_encode)
from ..mine import MineEstimator, Standardizer, estimate_mi, shuffle_marginals
from . import checkpoint as ckpt
from .config import ExperimentConfig, save_config

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "checkpoint.bin"


class TrainingAborted(RuntimeError):
    pass


class TaskData:
    """Sample source for one task config: generators, or a fixed encoded bAbI set."""

    def __init__(self, cfg: tasks.TaskConfig):
        self.cfg = cfg
        self.encoded = None
        if cfg.kind == "babi":
            corpus = load_babi(cfg)
            self.corpus = corpus
            self.encoded = tasks.babi_encode(corpus, cfg.max_story_len)
            if not self.encoded.samples:
                raise ValueError("no bAbI stories left after the length filter")

    @property
    def is_babi(self) -> bool:
        return self.encoded is not None

    def sample(self, rng: np.random.Generator) -> tasks.TaskSample:
        if self.is_babi:
            return self.encoded.samples[int(rng.integers(len(self.encoded.samples)))]
        return tasks.generate(self.cfg, rng)

    def eval_samples(self, n: int, rng: np.random.Generator) -> list:
        if self.is_babi:
            s = self.encoded.samples
            return [s[i % len(s)] for i in range(n)]
        return [tasks.generate(self.cfg, rng) for _ in range(n)]


def load_babi(cfg: tasks.TaskConfig) -> tasks.BabiCorpus:
    corpus = tasks.babi_parse(cfg.babi_dir, tasks=cfg.babi_tasks, split="train")
    if cfg.babi_max_stories:
        corpus.stories = corpus.stories[:cfg.babi_max_stories]
    return corpus


class Trainer:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(cfg.dtype)
        self.data = TaskData(cfg.task)
        if self.data.is_babi:
            V = len(self.data.corpus.vocab)
            if (cfg.dnc.input_dim, cfg.dnc.output_dim) != (V, V):
                raise dnc.ConfigError(f"bAbI vocabulary has {V} tokens; set dnc.input_dim = output_dim = {V}")
        init_ss, task_ss, demon_ss, mine_ss = np.random.SeedSequence(cfg.seed).spawn(4)
        init_rng = np.random.default_rng(init_ss)
        self.task_rng = np.random.default_rng(task_ss)
        self.demon_rng = np.random.default_rng(demon_ss)
        self.mine_rng = np.random.default_rng(mine_ss)

        d = cfg.dnc
        nw = d.N * d.W
        self.params = dnc.init_parameters(d, init_rng, self.dtype)
        self.standardizer = Standardizer(nw, warmup=cfg.mine.warmup)
        self.mine = MineEstimator(nw, nw, init_rng, hidden=tuple(cfg.mine.hidden), ema_decay=cfg.mine.ema_decay,
                                  lr=cfg.mine.lr, activation=cfg.mine.activation, dtype=self.dtype)
        state_dim = d.input_dim + nw
        self.policy = DemonPolicy(state_dim, d.input_dim, cfg.ppo, init_rng, self.dtype)
        self.value = ValueNetwork(state_dim, cfg.ppo.hidden, init_rng, self.dtype)
        self.reward_norm = RunningMeanStd()
        self.step_count = 0
        self.pair_counter = 0

    # ------------------------------------------------------------------
    # forward

    def rollout(self, x: np.ndarray, lengths: np.ndarray, rng: np.random.Generator | None,
                deterministic: bool = False, collect: bool = False):
        """Run the DNC over time-major inputs (T, B, input_dim).

        Returns (stacked outputs, memory snapshots (T+1, B, N, W), demon steps).
        """
        cfg = self.cfg
        T, B, _ = x.shape
        state = dnc.initial_state(cfg.dnc, B, self.dtype)
        ys, mems = [], [state.M.data]
        steps = {"states": [], "raw": [], "logp": [], "values": []}
        for t in range(T):
            xt = x[t]
            if cfg.demon_enabled:
                s = state_encode(xt, state.M.data, self.standardizer)
                a, raw, logp = self.policy.act(s, rng, deterministic=deterministic)
                if collect:
                    steps["states"].append(s)
                    steps["raw"].append(raw)
                    steps["logp"].append(logp)
                    steps["values"].append(self.value.predict(s))
                xt = xt + a  # constant input; no gradient reaches the policy
            state, y, _ = dnc.step(state, xt.astype(self.dtype), self.params, cfg.dnc)
            ys.append(y)
            mems.append(state.M.data)
        return dc.stack(ys), np.stack(mems), steps

    def task_loss(self, logits: dc.Tensor, y: np.ndarray, m: np.ndarray) -> dc.Tensor:
        norm = max(float(m.sum()), 1.0)
        if self.data.is_babi:
            return dc.softmax_xent(logits, y.argmax(-1), (m / norm).astype(self.dtype))
        w = np.broadcast_to(m[..., None], y.shape) / norm
        return dc.bernoulli_xent(logits, y.astype(self.dtype), w.astype(self.dtype))

    def batch_error(self, logits: np.ndarray, y: np.ndarray, m: np.ndarray) -> float:
        if self.data.is_babi:
            sel = m > 0
            return tasks.babi_error_rate(logits.argmax(-1)[sel], y.argmax(-1)[sel])
        return tasks.bit_error(_sigmoid(logits), y, m)

    # ------------------------------------------------------------------
    # one batch

    def training_step(self, samples: list | None = None) -> dict:
        cfg = self.cfg
        if samples is None:
            samples = [self.data.sample(self.task_rng) for _ in range(cfg.batch_size)]
        x, y, m, lengths = tasks.pad_batch(samples)
        logits, mems, steps = self.rollout(x, lengths, self.demon_rng, collect=cfg.demon_enabled)
        loss = self.task_loss(logits, y, m)
        if not np.isfinite(loss.data):
            raise TrainingAborted(f"non-finite task loss at step {self.step_count + 1}")
        self.params.zero_grad()
        dc.backward(loss)
        grad_norm = self.params.clip_grad_norm(cfg.grad_clip)
        dc.adam_step(self.params, cfg.lr)
        self.step_count += 1
        rec = {"step": self.step_count, "task_loss": float(loss.data),
               "error": self.batch_error(logits.data, y, m), "grad_norm": grad_norm}
        if cfg.demon_enabled:
            rec.update(self._demon_update(mems, lengths, steps))
        return rec

    def _demon_update(self, mems: np.ndarray, lengths: np.ndarray, steps: dict) -> dict:
        cfg = self.cfg
        T1, B = mems.shape[:2]
        flat = mems.reshape(T1, B, -1).astype(np.float64)
        std = self.standardizer

        # rewards from the network as it was before this batch's MINE update
        raw_rewards = []
        for b in range(B):
            n = int(lengths[b])
            r, _ = reward_from_mi(self.mine, std(flat[:n, b]), std(flat[1:n + 1, b]))
            raw_rewards.append(r)
        self.reward_norm.update(np.concatenate(raw_rewards))
        buf = RolloutBuffer()
        for b in range(B):
            n = int(lengths[b])
            rs = self.reward_norm.standardize(raw_rewards[b])
            for t in range(n):
                buf.add(steps["states"][t][b], steps["raw"][t][b], steps["logp"][t][b],
                        steps["values"][t][b], done=(t == n - 1), reward=rs[t])

        px, py = [], []
        for b in range(B):
            n = int(lengths[b])
            std.update(flat[1:n + 1, b])
            for t in snapshot_times(n, cfg.snapshot_stride):
                px.append(flat[t, b])
                py.append(flat[t + 1, b])
        px, py = std(np.array(px)), std(np.array(py))
        idx = self.pair_counter + np.arange(len(px))
        self.pair_counter += len(px)
        held = idx % cfg.mine.heldout_every == cfg.mine.heldout_every - 1
        mine_loss = float("nan")
        if (~held).sum() >= 2:
            for _ in range(cfg.mine.updates_per_batch):
                mine_loss = self.mine.update(shuffle_marginals(px[~held], py[~held], self.mine_rng))
        mi = float("nan")
        if held.sum() >= 2:
            mi = estimate_mi(self.mine, px[held], py[held], self.mine_rng)

        stats = ppo_update(self.policy, self.value, buf, cfg.ppo, self.demon_rng)
        return {
            "mi_estimate": mi, "mine_loss": mine_loss,
            "demon_reward_mean": float(np.mean(np.concatenate(raw_rewards))),
            "clip_frac": stats["clip_frac"], "mean_ratio": stats["ratio"],
            "policy_loss": stats["policy_loss"], "value_loss": stats["value_loss"],
        }

    # ------------------------------------------------------------------
    # evaluation

    def evaluate(self, n_samples: int, seed: int, task: tasks.TaskConfig | None = None) -> dict:
        """Forward-only error over fresh samples; the demon acts deterministically."""
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        data = self.data if task is None else TaskData(task)
        rng = np.random.default_rng(seed)
        samples = data.eval_samples(n_samples, rng)
        errs = []
        bs = self.cfg.batch_size
        with dc.no_grad():
            for i in range(0, len(samples), bs):
                chunk = samples[i:i + bs]
                x, y, m, lengths = tasks.pad_batch(chunk)
                logits, _, _ = self.rollout(x, lengths, None, deterministic=True)
                out = logits.data
                for b, s in enumerate(chunk):
                    n = s.length
                    if data.is_babi:
                        sel = s.loss_mask > 0
                        errs.append(tasks.babi_error_rate(out[:n, b].argmax(-1)[sel], s.targets.argmax(-1)[sel]))
                    else:
                        errs.append(tasks.bit_error(_sigmoid(out[:n, b]), s.targets, s.loss_mask))
        errs = np.array(errs)
        return {"error_mean": float(errs.mean()), "error_std": float(errs.std()), "n": int(errs.size)}

    # ------------------------------------------------------------------
    # persistence

    def stores(self):
        return [("dnc", self.params), ("mine", self.mine.params), ("policy", self.policy.params),
                ("value", self.value.params)]

    def state_records(self) -> "OrderedDict[str, np.ndarray]":
        rec: "OrderedDict[str, np.ndarray]" = OrderedDict()
        rec["meta/step"] = ckpt.u64_words(self.step_count)
        rec["meta/pair_counter"] = ckpt.u64_words(self.pair_counter)
        rec["rng/task"] = ckpt.rng_to_words(self.task_rng)
        rec["rng/demon"] = ckpt.rng_to_words(self.demon_rng)
        rec["rng/mine"] = ckpt.rng_to_words(self.mine_rng)
        for prefix, store in self.stores():
            rec[f"{prefix}/adam_t"] = ckpt.u64_words(store.adam_t)
            for name, arr in store.state_arrays().items():
                rec[f"{prefix}/{name}"] = arr
        has_ema = self.mine.log_ema is not None
        rec["mine_state/ema"] = np.array([self.mine.log_ema if has_ema else 0.0, float(has_ema)])
        rec["mine_state/updates"] = ckpt.u64_words(self.mine.updates)
        for k, v in self.standardizer.state_arrays().items():
            rec[f"standardizer/{k}"] = np.asarray(v, dtype=np.float64)
        rn = self.reward_norm
        rec["reward_norm"] = np.array([rn.count, rn.mean, rn.var])
        return rec

    def load_records(self, rec: dict) -> None:
        self.step_count = ckpt.words_u64(rec["meta/step"])
        self.pair_counter = ckpt.words_u64(rec["meta/pair_counter"])
        self.task_rng = ckpt.words_to_rng(rec["rng/task"])
        self.demon_rng = ckpt.words_to_rng(rec["rng/demon"])
        self.mine_rng = ckpt.words_to_rng(rec["rng/mine"])
        for prefix, store in self.stores():
            arrays = {k[len(prefix) + 1:]: v for k, v in rec.items() if k.startswith(prefix + "/")}
            store.load_state_arrays(arrays, ckpt.words_u64(rec[f"{prefix}/adam_t"]))
        ema, has = rec["mine_state/ema"]
        self.mine.log_ema = float(ema) if has else None
        self.mine.updates = ckpt.words_u64(rec["mine_state/updates"])
        self.standardizer.load_state_arrays(
            {k.split("/", 1)[1]: v for k, v in rec.items() if k.startswith("standardizer/")})
        self.reward_norm.count, self.reward_norm.mean, self.reward_norm.var = map(float, rec["reward_norm"])

    def save_checkpoint(self, path) -> None:
        ckpt.save(path, self.state_records(), self.cfg.digest())

    def load_checkpoint(self, path) -> None:
        self.load_records(ckpt.load(path, expected_digest=self.cfg.digest()))


def snapshot_times(T: int, stride: int) -> range:
    """Start times t of the MINE training pairs (M_t, M_t+1) of a length-T sequence.

    M_t is the memory after input t, so t runs over 1, 1+k, ... < T and the
    count is ceil((T - 1) / k).
    """
    return range(1, T, stride)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _mean(xs) -> float:
    xs = [v for v in xs if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(xs)) if xs else float("nan")


def _json_line(rec: dict) -> str:
    clean = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in rec.items()}
    return json.dumps(clean, sort_keys=True)


def train(cfg: ExperimentConfig, out_dir, resume: bool = False, max_steps: int | None = None) -> dict:
    """Run the configured budget, logging metrics and writing checkpoints into ``out_dir``.

    Returns the final summary record.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg)
    metrics_path = out / METRICS_FILE
    ckpt_path = out / CHECKPOINT_FILE
    if resume and ckpt_path.exists():
        trainer.load_checkpoint(ckpt_path)
        kept = [ln for ln in metrics_path.read_text().splitlines()
                if json.loads(ln).get("kind") == "metrics" and json.loads(ln)["step"] <= trainer.step_count]
        metrics_path.write_text("".join(k + "\n" for k in kept))
    else:
        metrics_path.write_text("")
    save_config(cfg, out / CONFIG_FILE)

    budget = cfg.steps if max_steps is None else min(cfg.steps, max_steps)
    eval_seed = cfg.seed + 1_000_003
    acc: dict = {}
    t0 = time.time()
    reached = None
    last_eval = None
    with open(metrics_path, "a") as mf:
        while trainer.step_count < budget:
            try:
                rec = trainer.training_step()
            except (dc.NonFiniteError, TrainingAborted) as exc:
                mf.write(_json_line({"kind": "abort", "step": trainer.step_count + 1, "reason": str(exc)}) + "\n")
                mf.flush()
                raise TrainingAborted(str(exc)) from exc
            for k, v in rec.items():
                if k != "step":
                    acc.setdefault(k, []).append(v)
            step = trainer.step_count
            if step % cfg.log_interval == 0 or step == budget:
                row = {"kind": "metrics", "step": step, "variant": cfg.variant, "seed": cfg.seed}
                row.update({k: _mean(v) for k, v in acc.items()})
                acc = {}
                if step % cfg.eval_interval == 0 or step == budget:
                    last_eval = trainer.evaluate(cfg.eval_samples, eval_seed)
                    row["eval_error"] = last_eval["error_mean"]
                    row["eval_error_std"] = last_eval["error_std"]
                    if reached is None and cfg.target_error is not None and last_eval["error_mean"] <= cfg.target_error:
                        reached = step
                row["wall_clock"] = round(time.time() - t0, 3)
                mf.write(_json_line(row) + "\n")
                mf.flush()
                log.info("step %d loss %.4f err %.4f", step, row.get("task_loss", float("nan")),
                         row.get("error", float("nan")))
                if step % cfg.checkpoint_interval == 0 or reached is not None:
                    trainer.save_checkpoint(ckpt_path)
                if reached is not None:
                    break
        if last_eval is None:
            last_eval = trainer.evaluate(cfg.eval_samples, eval_seed)
        trainer.save_checkpoint(ckpt_path)
        final_mi = _last_finite(metrics_path, "mi_estimate")
        summary = {
            "kind": "summary", "variant": cfg.variant, "seed": cfg.seed, "steps": trainer.step_count,
            "eval_error_mean": last_eval["error_mean"], "eval_error_std": last_eval["error_std"],
            "final_mi_estimate": final_mi, "reached_target_at": reached,
            "wall_clock": round(time.time() - t0, 3),
        }
        mf.write(_json_line(summary) + "\n")
    return summary


def _last_finite(metrics_path: Path, key: str) -> float | None:
    val = None
    for ln in metrics_path.read_text().splitlines():
        rec = json.loads(ln)
        if rec.get("kind") == "metrics" and rec.get(key) is not None:
            val = rec[key]
    return val


def load_run(out_dir) -> tuple[ExperimentConfig, list, dict | None]:
    """(config, metrics records, summary or None) of a run directory."""
    out = Path(out_dir)
    cfg_path, metrics_path = out / CONFIG_FILE, out / METRICS_FILE
    for p in (cfg_path, metrics_path):
        if not p.exists():
            raise FileNotFoundError(f"missing {p}")
    cfg = ExperimentConfig.from_json(cfg_path.read_text())
    records, summary = [], None
    for ln in metrics_path.read_text().splitlines():
        rec = json.loads(ln)
        if rec.get("kind") == "metrics":
            records.append(rec)
        elif rec.get("kind") == "summary":
            summary = rec
    return cfg, records, summary


def evaluate_checkpoint(checkpoint_path, task: str | None, n_samples: int, seed: int,
                        config_path=None) -> dict:
    """Load a checkpoint (against the run's config digest) and evaluate it."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    checkpoint_path = Path(checkpoint_path)
    config_path = Path(config_path) if config_path else checkpoint_path.parent / CONFIG_FILE
    cfg = ExperimentConfig.from_json(config_path.read_text()).validate()
    trainer = Trainer(cfg)
    trainer.load_checkpoint(checkpoint_path)
    task_cfg = None
    if task and task != cfg.task.kind:
        task_cfg = replace(cfg.task, kind=task).validate()
        if task != "babi" and task_cfg.dims() != (cfg.dnc.input_dim, cfg.dnc.output_dim):
            raise ValueError(f"task {task} dims {task_cfg.dims()} do not fit the checkpoint's DNC")
    res = trainer.evaluate(n_samples, seed, task_cfg)
    res.update({"task": task or cfg.task.kind, "seed": seed, "step": trainer.step_count})
    return res
