"""Group-robust minimax training over the privileged / non-privileged split.

Each step samples ``batch_size`` (instance, label) pairs, routes each pair to
its group's loss, takes a mirror-ascent step on the two group weights using
loss-scaled group losses and then a gradient step on the heads with the
alpha-weighted group-mean gradients. ``batch_size=1`` is the literal
one-label-per-step algorithm.

RNG consumption per step, in order: ``batch_size`` instance indices,
``batch_size`` label indices, then one uniform per non-empty confusing set in
batch order.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as L
from . import model as M
from ._io import FORMAT_VERSION, atomic_write_text, read_json, write_json
from .data import Dataset, LabelPartition

DELTA_NUM = 1e-8

MODES = ("fairpo", "fixed", "single_loss", "global_preference")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GroupWeights:
    alpha_p: float = 0.5
    alpha_np: float = 0.5
    running_avg_p: float = 0.0
    running_avg_np: float = 0.0
    ema_decay: float = 0.99
    warmup_count_p: int = 0
    warmup_count_np: int = 0
    warmup_steps: int = 20

    def observe(self, group: str, raw: float) -> tuple["GroupWeights", float]:
        """Fold one raw group loss into its running average; return the scaled loss."""
        if group == L.PRIVILEGED:
            avg, n = self.running_avg_p, self.warmup_count_p
        else:
            avg, n = self.running_avg_np, self.warmup_count_np
        avg = raw if n == 0 else self.ema_decay * avg + (1.0 - self.ema_decay) * raw
        n += 1
        scaled = scale_loss(raw, avg, n, self.warmup_steps)
        if group == L.PRIVILEGED:
            return replace(self, running_avg_p=avg, warmup_count_p=n), scaled
        return replace(self, running_avg_np=avg, warmup_count_np=n), scaled


def scale_loss(raw: float, running_avg: float, warmup: int, warmup_steps: int = 20) -> float:
    """Relative deviation of ``raw`` from the running average.

    ``warmup`` counts observations including the current one; the first
    ``warmup_steps`` of them scale to 0.
    """
    if warmup <= warmup_steps:
        return 0.0
    return (raw - running_avg) / (abs(running_avg) + DELTA_NUM)


def mirror_ascent_update(weights: GroupWeights, scaled_p: float, scaled_np: float,
                         eta_alpha: float) -> GroupWeights:
    """alpha_g <- alpha_g exp(eta * scaled_g), renormalised to the simplex."""
    if eta_alpha == 0.0 or (scaled_p == 0.0 and scaled_np == 0.0):
        return weights
    with np.errstate(divide="ignore"):
        la = np.log([weights.alpha_p, weights.alpha_np]) + eta_alpha * np.array([scaled_p, scaled_np])
    la -= la.max()
    a = np.exp(la)
    z = a[0] + a[1]
    return replace(weights, alpha_p=float(a[0] / z), alpha_np=float(a[1] / z))


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "fairpo"
    variant: str = "CPO"
    eta_theta: float = 0.05
    eta_alpha: float = 0.003
    max_iterations: int = 20_000
    batch_size: int = 32
    fixed_weight_p: float = 0.5
    pointwise_loss: str = "bce"
    no_preference: bool = False
    np_constraint_off: bool = False
    only_confusing_negatives: bool = False
    no_bce_fallback: bool = False
    init: str = "reference"
    head_kind: str = "linear"
    hidden: tuple[int, ...] = (16, 8)
    ema_decay: float = 0.99
    warmup_steps: int = 20
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.variant not in L.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.eta_theta <= 0 or self.eta_alpha < 0:
            raise ValueError("eta_theta must be > 0 and eta_alpha >= 0")
        if self.max_iterations < 1 or self.batch_size < 1:
            raise ValueError("max_iterations and batch_size must be >= 1")
        if not 0.0 <= self.fixed_weight_p <= 1.0:
            raise ValueError("fixed_weight_p must be in [0, 1]")
        if self.pointwise_loss not in ("bce", "focal"):
            raise ValueError(f"unknown pointwise_loss {self.pointwise_loss!r}")
        if self.init not in ("reference", "scratch"):
            raise ValueError(f"unknown init {self.init!r}")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def needs_reference(self) -> bool:
        if self.init == "reference":
            return True
        if self.mode in ("fairpo", "fixed"):
            hinge = not self.np_constraint_off
            dpo = self.variant == "DPO" and not self.no_preference
            return hinge or dpo
        return self.mode == "global_preference" and self.variant == "DPO"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = L.LossConfig(**d.pop("loss", {}))
        return cls(loss=loss, **d)


@dataclass
class TrainState:
    params: M.ModelParams
    weights: GroupWeights
    rng: np.random.Generator
    step: int = 0

    def optimizer_dict(self) -> dict:
        d = {"format_version": FORMAT_VERSION, "step": self.step,
             "rng_state": self.rng.bit_generator.state}
        d.update(asdict(self.weights))
        return d


def save_optimizer_state(path, state: TrainState, config: TrainConfig | None = None) -> None:
    d = state.optimizer_dict()
    if config is not None:
        d["config"] = config.to_dict()
    write_json(path, d)


def load_state(model_path, optimizer_path) -> TrainState:
    params, _ = M.load_checkpoint(model_path)
    d = read_json(optimizer_path)
    rng = np.random.default_rng()
    rng.bit_generator.state = d["rng_state"]
    fields = {k: d[k] for k in GroupWeights.__dataclass_fields__}
    return TrainState(params, GroupWeights(**fields), rng, d["step"])


_P, _NP = 0, 1
_ROUTE = {r: i for i, r in enumerate(L.ROUTINGS)}


@dataclass
class TrainTrace:
    """Per-step arrays; group losses of an unobserved group are NaN."""

    step: np.ndarray
    alpha_p: np.ndarray
    raw: np.ndarray  # (S, 2)
    scaled: np.ndarray  # (S, 2)
    counts: np.ndarray  # (S, 2, len(ROUTINGS)) pairs per group and routing
    evals: list = field(default_factory=list)

    @classmethod
    def empty(cls, n: int) -> "TrainTrace":
        return cls(
            np.zeros(n, dtype=np.int64),
            np.zeros(n),
            np.full((n, 2), np.nan),
            np.zeros((n, 2)),
            np.zeros((n, 2, len(L.ROUTINGS)), dtype=np.int64),
        )

    def __len__(self):
        return len(self.step)

    def routing_count(self, group: str, routing: str, steps=slice(None)) -> int:
        g = _P if group == L.PRIVILEGED else _NP
        return int(self.counts[steps, g, _ROUTE[routing]].sum())

    def group_pairs(self, group: str, steps=slice(None)) -> int:
        g = _P if group == L.PRIVILEGED else _NP
        return int(self.counts[steps, g].sum())

    def fallback_rate(self, steps=slice(None)) -> float:
        n = self.group_pairs(L.PRIVILEGED, steps)
        return self.routing_count(L.PRIVILEGED, L.FALLBACK, steps) / n if n else float("nan")

    def equals(self, other: "TrainTrace") -> bool:
        return all(
            np.array_equal(a, b, equal_nan=a.dtype.kind == "f")
            for a, b in [(self.step, other.step), (self.alpha_p, other.alpha_p),
                         (self.raw, other.raw), (self.scaled, other.scaled),
                         (self.counts, other.counts)]
        )

    def to_csv(self) -> str:
        """One row per (step, observed group); routing as ``Tag:count`` pairs."""
        out = io.StringIO()
        out.write("step,group,routing,raw_loss,scaled_loss,alpha_p\n")
        for s in range(len(self.step)):
            for g, name in ((_P, L.PRIVILEGED), (_NP, L.NON_PRIVILEGED)):
                c = self.counts[s, g]
                if not c.any():
                    continue
                routing = ";".join(f"{r}:{c[i]}" for i, r in enumerate(L.ROUTINGS) if c[i])
                out.write(f"{self.step[s]},{name},{routing},{float(self.raw[s, g])!r},"
                          f"{float(self.scaled[s, g])!r},{float(self.alpha_p[s])!r}\n")
        return out.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


class _Engine:
    """Precomputed per-run arrays and the vectorised step."""

    def __init__(self, dataset: Dataset, partition: LabelPartition, reference, cfg: TrainConfig):
        if partition.n_labels != dataset.n_labels:
            raise TrainingError("partition and dataset disagree on the number of labels")
        self.cfg = cfg
        self.Z = dataset.features
        self.Y = dataset.labels.astype(np.int64)
        self.N, self.T = self.Y.shape
        if cfg.mode == "global_preference":
            self.priv = np.ones(self.T, dtype=bool)
        else:
            self.priv = partition.privileged_mask()
        self.ref_scores = M.forward(reference, self.Z) if reference is not None else None

    def step(self, state: TrainState, trace: TrainTrace | None = None, row: int = 0) -> None:
        cfg, lc = self.cfg, self.cfg.loss
        B = cfg.batch_size
        rng = state.rng
        idx = rng.integers(0, self.N, size=B)
        r = rng.integers(0, self.T, size=B)
        rows = np.arange(B)
        Zb, Yb = self.Z[idx], self.Y[idx]
        S = M.forward(state.params, Zb)
        m_r, y_r = S[rows, r], Yb[rows, r]
        is_p = self.priv[r]

        values = np.zeros(B)
        C = np.zeros((B, self.T))
        route = np.empty(B, dtype=np.int64)

        def pointwise(sel, routing):
            if cfg.pointwise_loss == "focal" and cfg.mode == "single_loss":
                v, g = L.focal_terms(m_r[sel], y_r[sel], lc.focal_alpha, lc.focal_gamma)
            else:
                v, g = L.bce_terms(m_r[sel], y_r[sel])
            values[sel] = v
            C[rows[sel], r[sel]] += g
            route[sel] = _ROUTE[routing]

        if cfg.mode == "single_loss":
            pointwise(rows, L.POINTWISE)
        else:
            # privileged pairs
            p_sel = np.flatnonzero(is_p)
            if cfg.no_preference:
                pointwise(p_sel, L.FALLBACK)
            elif p_sel.size:
                self._privileged(p_sel, S, Yb, idx, r, rng, values, C, route)
            # non-privileged pairs
            np_sel = np.flatnonzero(~is_p)
            if cfg.np_constraint_off:
                pointwise(np_sel, L.POINTWISE)
            elif np_sel.size:
                ref_r = self.ref_scores[idx[np_sel], r[np_sel]]
                v, g = L.hinge_terms(m_r[np_sel], ref_r, y_r[np_sel], lc.epsilon_slack)
                values[np_sel] = v
                C[np_sel, r[np_sel]] += g
                route[np_sel] = _ROUTE[L.HINGE]

        bad = ~np.isfinite(values) | ~np.isfinite(C).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise TrainingError(
                f"non-finite loss or gradient at step {state.step}: group "
                f"{'P' if is_p[i] else 'NP'}, routing {L.ROUTINGS[route[i]]}"
            )

        n_p = int(is_p.sum())
        n_np = B - n_p
        raw_p = float(values[is_p].mean()) if n_p else float("nan")
        raw_np = float(values[~is_p].mean()) if n_np else float("nan")

        w = state.weights
        scaled_p = scaled_np = 0.0
        if n_p:
            w, scaled_p = w.observe(L.PRIVILEGED, raw_p)
        if n_np:
            w, scaled_np = w.observe(L.NON_PRIVILEGED, raw_np)
        if cfg.mode == "fairpo":
            w = mirror_ascent_update(w, scaled_p, scaled_np, cfg.eta_alpha)
        state.weights = w

        coef = np.where(is_p, w.alpha_p / max(n_p, 1), w.alpha_np / max(n_np, 1))
        C *= coef[:, None]
        grads = M.backprop(state.params, Zb, C)
        for (W, b), (dW, db) in zip(state.params.layers, grads):
            W -= cfg.eta_theta * dW
            b -= cfg.eta_theta * db

        if trace is not None:
            trace.step[row] = state.step
            trace.alpha_p[row] = w.alpha_p
            trace.raw[row] = (raw_p, raw_np)
            trace.scaled[row] = (scaled_p, scaled_np)
            np.add.at(trace.counts[row], (np.where(is_p, _P, _NP), route), 1)
        state.step += 1

    def _privileged(self, sel, S, Yb, idx, r, rng, values, C, route):
        cfg, lc = self.cfg, self.cfg.loss
        Ss, Ys, rs = S[sel], Yb[sel], r[sel]
        rows = np.arange(sel.size)
        m_a, y_a = Ss[rows, rs], Ys[rows, rs]
        mask = L.confusing_mask(Ss, Ys, rs)
        if cfg.only_confusing_negatives:
            mask[y_a == 0] = False
        nonempty = mask.any(axis=1)

        empty = sel[~nonempty]
        if empty.size:
            if cfg.no_bce_fallback:
                values[empty] = 0.0
                route[empty] = _ROUTE[L.SKIPPED]
            else:
                v, g = L.bce_terms(m_a[~nonempty], y_a[~nonempty])
                values[empty] = v
                C[empty, rs[~nonempty]] += g
                route[empty] = _ROUTE[L.FALLBACK]

        if not nonempty.any():
            return
        ne = np.flatnonzero(nonempty)
        u = rng.random(ne.size)
        k = L.pick_member(mask[ne], u)
        anchor, ya = rs[ne], y_a[ne]
        pref = np.where(ya == 1, anchor, k)
        disp = np.where(ya == 1, k, anchor)
        Sn = Ss[ne]
        m_p, m_d = Sn[np.arange(ne.size), pref], Sn[np.arange(ne.size), disp]
        if cfg.variant == "DPO":
            R = self.ref_scores[idx[sel[ne]]]
            off = L.dpo_offset(R[np.arange(ne.size), pref], R[np.arange(ne.size), disp], lc.beta)
        elif cfg.variant == "SimPO":
            off = -lc.gamma_margin
        else:
            off = 0.0
        v, gp, gd = L.preference_terms(m_p, m_d, lc.beta, off)
        target = sel[ne]
        C[target, pref] += gp
        C[target, disp] += gd
        if cfg.variant == "CPO":
            reg, gl = L.bce_terms(m_a[ne], ya)
            v = v + lc.lambda_cpo * reg
            C[target, anchor] += lc.lambda_cpo * gl
        values[target] = v
        route[target] = _ROUTE[L.PREFERENCE]


def initial_state(dataset: Dataset, reference, cfg: TrainConfig) -> TrainState:
    init_seq, sample_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if cfg.init == "reference":
        if reference is None:
            raise TrainingError("init='reference' needs a reference model")
        params = M.snapshot_reference(reference).thaw()
    else:
        params = M.init_params(dataset.n_labels, dataset.n_features, cfg.head_kind, cfg.hidden,
                               np.random.default_rng(init_seq))
    if cfg.mode == "global_preference":
        a_p = 1.0
    elif cfg.mode in ("fixed", "single_loss"):
        a_p = cfg.fixed_weight_p
    else:
        a_p = 0.5
    weights = GroupWeights(alpha_p=a_p, alpha_np=1.0 - a_p, ema_decay=cfg.ema_decay,
                           warmup_steps=cfg.warmup_steps)
    return TrainState(params, weights, np.random.default_rng(sample_seq), 0)


def train_step(state: TrainState, dataset: Dataset, partition: LabelPartition, reference,
               cfg: TrainConfig) -> TrainTrace:
    """One update in place; returns a one-row trace."""
    trace = TrainTrace.empty(1)
    _Engine(dataset, partition, reference, cfg).step(state, trace, 0)
    return trace


def train(
    dataset: Dataset,
    partition: LabelPartition,
    reference,
    cfg: TrainConfig,
    state: TrainState | None = None,
    eval_fn=None,
) -> tuple[M.ModelParams, TrainTrace, TrainState]:
    """Run steps until ``state.step == cfg.max_iterations``.

    Pass a ``state`` restored from a checkpoint to continue a run; the result
    is identical to an uninterrupted run. ``eval_fn(params, step)`` is called
    every ``cfg.eval_every`` steps when both are set and its return values are
    kept in ``trace.evals``.
    """
    if cfg.needs_reference and reference is None:
        raise TrainingError(f"mode {cfg.mode!r} with these flags needs a reference model")
    if state is None:
        state = initial_state(dataset, reference, cfg)
    engine = _Engine(dataset, partition, reference, cfg)
    n = cfg.max_iterations - state.step
    if n < 0:
        raise TrainingError(f"state is at step {state.step}, past max_iterations")
    trace = TrainTrace.empty(n)
    for row in range(n):
        engine.step(state, trace, row)
        if eval_fn is not None and cfg.eval_every and state.step % cfg.eval_every == 0:
            trace.evals.append((state.step, eval_fn(state.params, state.step)))
    return state.params, trace, state
