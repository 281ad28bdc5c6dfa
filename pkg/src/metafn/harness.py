"""Training/evaluation loops, scenario studies, gradient checks, CSV output.

Everything user-facing routes through :class:`RunConfig`. A run is fully
determined by (config, seed): episode sampling, initialization and
evaluation each draw from their own seed-derived stream, per-task work
is reduced in fixed task order, and CSV floats are formatted with a
fixed repr, so repeated runs emit byte-identical artifacts.

CSV schemas (frozen):

* metrics.csv  — iter, split, metric, value, ci95
* weights.csv  — iter, i, j, w_ij               (with --dump-weights)
* summary.csv  — label, algorithm, aggregator, metric, mean, ci95, n_episodes
* bench.csv    — algorithm, inner_steps, metric, mean, ci95
"""

from __future__ import annotations

import logging
import os
import time
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import gradnet, inner_kernel, inner_maml, outer, tasks
from .errors import ConfigError, DimensionMismatch
from .inner_kernel import KernelParams, RegWeights
from .inner_maml import InnerConfig
from .tasks import Episode, TaskDistribution

log = logging.getLogger("metafn")

ALGORITHMS = ("maml", "fo_maml", "i_amfs")
AGGREGATORS = ("plain", "o_amfs")

# stream tags keeping init/train/eval RNG streams disjoint
_INIT_TAG, _TRAIN_TAG, _EVAL_TAG = 101, 202, 303


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass
class RunConfig:
    seed: int = 0
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    meta_batch_size: int = 4
    inner_algorithm: str = "i_amfs"
    outer_aggregator: str = "o_amfs"
    beta: float = 0.001
    n_meta_iters: int = 2000
    eval_episodes: int = 600
    eval_interval: int = 0  # 0: evaluate only at the end
    threads: int = 1
    optimizer: str = "sgd"
    dump_weights: bool = False
    out: Optional[str] = None
    task: dict = field(default_factory=lambda: {"kind": "gaussian_blobs"})
    task_test: Optional[dict] = None
    inner: dict = field(default_factory=dict)  # inner_lr, n_steps
    reg: dict = field(default_factory=dict)  # mu, gamma, mu_sign
    model: dict = field(default_factory=dict)  # hidden, embed_dim, kernel_on

    def __post_init__(self):
        for name in ("n_way", "k_shot", "q_query", "meta_batch_size", "eval_episodes", "threads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_meta_iters < 0:
            raise ConfigError("n_meta_iters must be nonnegative")
        if self.inner_algorithm not in ALGORITHMS:
            raise ConfigError(f"inner_algorithm must be one of {ALGORITHMS}")
        if self.outer_aggregator not in AGGREGATORS:
            raise ConfigError(f"outer_aggregator must be one of {AGGREGATORS}")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_toml(cls, path: str) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def inner_config(self) -> InnerConfig:
        order = "first" if self.inner_algorithm == "fo_maml" else "second"
        return InnerConfig(
            inner_lr=float(self.inner.get("inner_lr", 0.01)),
            n_steps=int(self.inner.get("n_steps", 1)),
            order=order,
        )

    def reg_weights(self) -> RegWeights:
        return RegWeights(
            mu=float(self.reg.get("mu", 0.0)),
            gamma=float(self.reg.get("gamma", 0.0)),
            mu_sign=int(self.reg.get("mu_sign", 1)),
        )


def build_distribution(spec: dict, default_seed: int) -> TaskDistribution:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind is None:
        raise ConfigError("task spec needs a 'kind'")
    spec.setdefault("seed", default_seed)
    if "centers" in spec:
        spec["centers"] = np.asarray(spec["centers"], dtype=np.float64)
    try:
        return TaskDistribution(kind=kind, **spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad task spec: {exc}") from exc


@dataclass
class EvalSummary:
    mean_metric: float
    ci95_halfwidth: float
    n_episodes: int
    metric_kind: str  # "accuracy" | "mse"


@dataclass
class MetricsRecord:
    meta_iter: int
    train_loss: float
    eval_summary: Optional[EvalSummary]
    wall_time: float
    solve_count: int
    step_count: int


class KernelModel:
    """I-AMFS: kernel hyperparameters (and optional embedding) as meta-params."""

    algorithm = "i_amfs"

    def __init__(self, kp: KernelParams, rw: RegWeights):
        self.kp = kp
        self.rw = rw

    def get_flat(self) -> np.ndarray:
        return inner_kernel.flatten_params(self.kp)

    def set_flat(self, v: np.ndarray):
        self.kp = inner_kernel.unflatten_params(v, self.kp)

    def task_loss_grad(self, episode: Episode):
        loss, grads = inner_kernel.task_objective(episode, self.kp, self.rw)
        return loss, inner_kernel.flatten_grads(grads)

    def episode_metric(self, episode: Episode) -> float:
        a = inner_kernel.adapt(episode, self.kp)
        if episode.kind == "classification":
            pred = inner_kernel.predict_labels(a, episode.query_x)
            return float(np.mean(pred == episode.query_y))
        f = inner_kernel.predict(a, episode.query_x)
        return float(np.mean((f - episode.query_y) ** 2))


class MamlModel:
    """MAML baseline: network weights as meta-params."""

    def __init__(self, net: gradnet.NetParams, cfg: InnerConfig, algorithm: str):
        self.net = net
        self.cfg = cfg
        self.algorithm = algorithm

    def get_flat(self) -> np.ndarray:
        return gradnet.flatten(self.net)

    def set_flat(self, v: np.ndarray):
        self.net = gradnet.unflatten(v, self.net)

    def task_loss_grad(self, episode: Episode):
        adapted = inner_maml.adapt_maml(episode, self.net, self.cfg)
        loss, _ = inner_maml.query_loss_grad(adapted.theta_prime, episode)
        g = inner_maml.meta_gradient(episode, self.net, adapted, self.cfg)
        return loss, g

    def episode_metric(self, episode: Episode, n_steps: Optional[int] = None) -> float:
        cfg = self.cfg if n_steps is None else replace(self.cfg, n_steps=n_steps)
        adapted = inner_maml.adapt_maml(episode, self.net, cfg)
        out, _ = gradnet.forward(adapted.theta_prime, episode.query_x)
        if episode.kind == "classification":
            return float(np.mean(np.argmax(out, axis=1) == episode.query_y))
        return float(np.mean((out[:, 0] - episode.query_y) ** 2))


def build_model(cfg: RunConfig, dist: TaskDistribution):
    rng = np.random.default_rng([cfg.seed, _INIT_TAG])
    hidden = int(cfg.model.get("hidden", 40))
    if cfg.inner_algorithm == "i_amfs":
        kernel_on = cfg.model.get("kernel_on", "auto")
        embed_dim = int(cfg.model.get("embed_dim", 32))
        if kernel_on == "raw":
            kp = KernelParams()
        else:
            net = gradnet.init_mlp(
                [dist.input_dim, hidden, hidden, embed_dim],
                ["relu", "relu", "identity"],
                rng,
            )
            kp = KernelParams(embed=net)
        return KernelModel(kp, cfg.reg_weights())
    if dist.task_kind == "regression":
        net = gradnet.init_mlp([dist.input_dim, hidden, hidden, 1], ["tanh", "tanh", "identity"], rng)
    else:
        net = gradnet.init_mlp(
            [dist.input_dim, hidden, hidden, cfg.n_way], ["relu", "relu", "identity"], rng
        )
    return MamlModel(net, cfg.inner_config(), cfg.inner_algorithm)


def _metric_kind(dist: TaskDistribution) -> str:
    return "mse" if dist.task_kind == "regression" else "accuracy"


def evaluate(
    model, cfg: RunConfig, dist: TaskDistribution, eval_index: int = 0, n_steps: Optional[int] = None
) -> EvalSummary:
    """Mean metric with a 95% CI half-width over fresh eval episodes.

    Eval episodes come from a seed stream disjoint from training;
    ``eval_index`` separates repeated evaluations within one run.
    """
    rng = np.random.default_rng([cfg.seed, _EVAL_TAG, eval_index])
    n_way = 1 if dist.task_kind == "regression" else cfg.n_way
    vals = np.empty(cfg.eval_episodes)
    debug = log.isEnabledFor(logging.DEBUG)
    for i in range(cfg.eval_episodes):
        ep = tasks.sample_episode(dist, n_way, cfg.k_shot, cfg.q_query, rng)
        if debug:
            log.debug("eval episode %d hash %s", i, ep.content_hash())
        if isinstance(model, MamlModel) and n_steps is not None:
            vals[i] = model.episode_metric(ep, n_steps=n_steps)
        else:
            vals[i] = model.episode_metric(ep)
    std = float(np.std(vals, ddof=0))
    return EvalSummary(
        mean_metric=float(np.mean(vals)),
        ci95_halfwidth=1.96 * std / np.sqrt(cfg.eval_episodes),
        n_episodes=cfg.eval_episodes,
        metric_kind=_metric_kind(dist),
    )


def _batch_grads(model, episodes, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(model.task_loss_grad, episodes))
    return [model.task_loss_grad(ep) for ep in episodes]


def train(cfg: RunConfig, out_dir: Optional[str] = None):
    """Run meta-training; returns (model, metrics records).

    Writes metrics.csv (and weights.csv with dump_weights) under
    ``out_dir`` when given.
    """
    dist = build_distribution(cfg.task, default_seed=cfg.seed)
    model = build_model(cfg, dist)
    rng = np.random.default_rng([cfg.seed, _TRAIN_TAG])
    n_way = 1 if dist.task_kind == "regression" else cfg.n_way
    opt = outer.make_optimizer(cfg.optimizer, model.get_flat().size)
    inner_kernel.SOLVES.reset()
    inner_maml.STEPS.reset()

    records: list[MetricsRecord] = []
    metric_lines = ["iter,split,metric,value,ci95\n"]
    weight_lines = ["iter,i,j,w_ij\n"]
    t0 = time.monotonic()
    eval_count = 0
    debug = log.isEnabledFor(logging.DEBUG)

    for it in range(1, cfg.n_meta_iters + 1):
        episodes = [
            tasks.sample_episode(dist, n_way, cfg.k_shot, cfg.q_query, rng)
            for _ in range(cfg.meta_batch_size)
        ]
        if debug:
            for ep in episodes:
                log.debug("train iter %d episode hash %s", it, ep.content_hash())
        results = _batch_grads(model, episodes, cfg.threads)
        bundle = outer.GradientBundle(
            [g for _, g in results], [ep.task_id for ep in episodes]
        )
        if cfg.outer_aggregator == "o_amfs":
            agg, report = outer.aggregate_oamfs(bundle)
            if cfg.dump_weights:
                m = bundle.m
                for i in range(m):
                    for j in range(m):
                        if i != j:
                            weight_lines.append(
                                f"{it},{i},{j},{_fmt(report.weights[i, j])}\n"
                            )
        else:
            agg = outer.aggregate_plain(bundle)
        flat = model.get_flat()
        if opt is None:
            flat = outer.meta_step(flat, agg, cfg.beta)
        else:
            flat = opt.step(flat, agg, cfg.beta)
        model.set_flat(flat)

        train_loss = float(np.mean([l for l, _ in results]))
        metric_lines.append(f"{it},train,loss,{_fmt(train_loss)},0\n")

        do_eval = (cfg.eval_interval and it % cfg.eval_interval == 0) or it == cfg.n_meta_iters
        summary = None
        if do_eval:
            summary = evaluate(model, cfg, dist, eval_index=eval_count)
            eval_count += 1
            metric_lines.append(
                f"{it},eval,{summary.metric_kind},{_fmt(summary.mean_metric)},"
                f"{_fmt(summary.ci95_halfwidth)}\n"
            )
            log.info(
                "iter %d train_loss %.5f eval %s %.5f ±%.5f",
                it,
                train_loss,
                summary.metric_kind,
                summary.mean_metric,
                summary.ci95_halfwidth,
            )
        records.append(
            MetricsRecord(
                meta_iter=it,
                train_loss=train_loss,
                eval_summary=summary,
                wall_time=time.monotonic() - t0,
                solve_count=inner_kernel.SOLVES.count,
                step_count=inner_maml.STEPS.count,
            )
        )

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
            fh.writelines(metric_lines)
        if cfg.dump_weights:
            with open(os.path.join(out_dir, "weights.csv"), "w") as fh:
                fh.writelines(weight_lines)
    return model, records


def write_summary(path: str, rows: list[tuple]):
    with open(path, "w") as fh:
        fh.write("label,algorithm,aggregator,metric,mean,ci95,n_episodes\n")
        for label, algo, agg, summary in rows:
            fh.write(
                f"{label},{algo},{agg},{summary.metric_kind},"
                f"{_fmt(summary.mean_metric)},{_fmt(summary.ci95_halfwidth)},"
                f"{summary.n_episodes}\n"
            )


def scenario(cfg: RunConfig, out_dir: Optional[str] = None):
    """Train on cfg.task, evaluate on both cfg.task and cfg.task_test."""
    if cfg.task_test is None:
        raise ConfigError("scenario needs a [task_test] section")
    train_dist = build_distribution(cfg.task, default_seed=cfg.seed)
    test_dist = build_distribution(cfg.task_test, default_seed=cfg.seed + 1)
    tasks.scenario_pair(train_dist, test_dist)  # validates compatibility
    model, _ = train(cfg, out_dir=out_dir)
    in_dist = evaluate(model, cfg, train_dist, eval_index=1_000_000)
    out_of_dist = evaluate(model, cfg, test_dist, eval_index=1_000_001)
    if out_dir is not None:
        write_summary(
            os.path.join(out_dir, "summary.csv"),
            [
                ("in_dist", cfg.inner_algorithm, cfg.outer_aggregator, in_dist),
                ("out_of_dist", cfg.inner_algorithm, cfg.outer_aggregator, out_of_dist),
            ],
        )
    return in_dist, out_of_dist


MAX_CHECK_PARAMS = 200


def check_gradients(cfg: RunConfig, corrupt: bool = False):
    """FD-verify every meta-gradient path on tiny models.

    Returns a list of (path_name, CheckReport). ``corrupt`` doubles one
    partial in each analytic gradient to prove the check can fail.
    """
    rng = np.random.default_rng([cfg.seed, _INIT_TAG, 7])
    dist = TaskDistribution(kind="sinusoid", seed=cfg.seed)
    episode = tasks.sample_episode(dist, 1, 5, 8, rng)
    rw = cfg.reg_weights()
    results = []

    def maybe_corrupt(fn):
        if not corrupt:
            return fn

        def wrapped(v):
            loss, g = fn(v)
            g = np.array(g, copy=True)
            g[np.argmax(np.abs(g))] *= 2.0  # double the most significant partial
            return loss, g

        return wrapped

    # i_amfs, raw-input kernel: sigma and lambda paths
    kp_raw = KernelParams()

    def kernel_flat(kp):
        def fn(v):
            p = inner_kernel.unflatten_params(v, kp)
            loss, grads = inner_kernel.task_objective(episode, p, rw)
            return loss, inner_kernel.flatten_grads(grads)

        return fn

    rep = gradnet.fd_check_flat(
        maybe_corrupt(kernel_flat(kp_raw)), inner_kernel.flatten_params(kp_raw), tol=1e-4
    )
    results.append(("i_amfs/sigma_lambda", rep))

    # i_amfs with a tiny embedding net
    net = gradnet.init_mlp([1, 6, 4], ["tanh", "identity"], rng)
    kp_embed = KernelParams(embed=net)
    assert gradnet.num_params(net) + 2 <= MAX_CHECK_PARAMS
    rep = gradnet.fd_check_flat(
        maybe_corrupt(kernel_flat(kp_embed)), inner_kernel.flatten_params(kp_embed), tol=1e-4
    )
    results.append(("i_amfs/embed", rep))

    # maml second-order path through the full bi-level objective
    tiny = gradnet.init_mlp([1, 5, 1], ["tanh", "identity"], rng)
    assert gradnet.num_params(tiny) <= MAX_CHECK_PARAMS
    icfg = InnerConfig(inner_lr=0.01, n_steps=2, order="second")

    def bilevel(v):
        theta = gradnet.unflatten(v, tiny)
        adapted = inner_maml.adapt_maml(episode, theta, icfg)
        loss, _ = inner_maml.query_loss_grad(adapted.theta_prime, episode)
        g = inner_maml.meta_gradient(episode, theta, adapted, icfg)
        return loss, g

    rep = gradnet.fd_check_flat(maybe_corrupt(bilevel), gradnet.flatten(tiny), tol=1e-3)
    results.append(("maml/second_order", rep))

    # fo_maml: the first-order gradient is the exact gradient of the
    # query loss at theta'; check it against FD of that same quantity
    focfg = InnerConfig(inner_lr=0.01, n_steps=1, order="first")
    adapted_fo = inner_maml.adapt_maml(episode, tiny, focfg)

    def fo(v):
        theta_p = gradnet.unflatten(v, tiny)
        return inner_maml.query_loss_grad(theta_p, episode)

    rep = gradnet.fd_check_flat(
        maybe_corrupt(fo), gradnet.flatten(adapted_fo.theta_prime), tol=1e-4
    )
    results.append(("fo_maml/query_grad", rep))
    return results


def bench_steps(cfg: RunConfig, out_dir: Optional[str] = None):
    """Inner-step sweep: MAML evaluated at 1..5 steps vs one-solve I-AMFS.

    Returns (maml_summaries keyed by step count, amfs_summary).
    """
    maml_cfg = replace(cfg, inner_algorithm="maml")
    maml_model, _ = train(maml_cfg)
    maml_summaries = {}
    dist = build_distribution(cfg.task, default_seed=cfg.seed)
    for steps in range(1, 6):
        maml_summaries[steps] = evaluate(
            maml_model, maml_cfg, dist, eval_index=2_000_000 + steps, n_steps=steps
        )
    amfs_cfg = replace(cfg, inner_algorithm="i_amfs")
    amfs_model, _ = train(amfs_cfg)
    amfs_summary = evaluate(amfs_model, amfs_cfg, dist, eval_index=2_000_010)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "bench.csv"), "w") as fh:
            fh.write("algorithm,inner_steps,metric,mean,ci95\n")
            for steps, s in sorted(maml_summaries.items()):
                fh.write(
                    f"maml,{steps},{s.metric_kind},{_fmt(s.mean_metric)},{_fmt(s.ci95_halfwidth)}\n"
                )
            fh.write(
                f"i_amfs,1,{amfs_summary.metric_kind},{_fmt(amfs_summary.mean_metric)},"
                f"{_fmt(amfs_summary.ci95_halfwidth)}\n"
            )
    return maml_summaries, amfs_summary
