"""Three-stage adversarial training: H2L pair, L2H pair, then joint fine-tuning of all four nets.

Each step function mutates and returns the TrainState it was given. The
data for iteration ``i`` is drawn with ``iteration_seed(plan.seed, i)``,
so a run resumed from a checkpoint replays exactly what an uninterrupted
run would have seen.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import losses
from .data import Batch, PairManifest, iteration_seed, sample_batch
from .errors import ArgumentError, FormatError, NotFound, NumericError, SpecError
from .imaging import NoiseSpec
from .losses import LossReport, LossWeights
from .networks import (DISCRIMINATOR, H2L_GEN, L2H_GEN, FeatureExtractor, NetworkSpec, NetworkState,
                       build_network, load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

STAGES = ("H2L", "L2H", "JOINT")
NET_NAMES = ("g_h2l", "d_h2l", "g_l2h", "d_l2h")
STAGE_NETS = {
    "H2L": ("g_h2l", "d_h2l"),
    "L2H": ("g_l2h", "d_l2h"),
    "JOINT": NET_NAMES,
}
STATE_FORMAT = "srdgan-train-state"
STATE_VERSION = 1


@dataclass
class LRSchedule:
    initial: float | None = 1e-4
    halve_at: tuple[int, ...] = (50_000, 100_000, 200_000, 300_000)

    def __post_init__(self):
        self.halve_at = tuple(int(x) for x in self.halve_at)
        if any(b <= a for a, b in zip(self.halve_at, self.halve_at[1:])):
            raise ArgumentError(f"halve_at must be strictly increasing: {self.halve_at}")


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8


def lr_at(schedule: LRSchedule, iteration: int) -> float:
    if iteration < 0:
        raise ArgumentError("iteration must be >= 0")
    halvings = sum(1 for t in schedule.halve_at if t <= iteration)
    return schedule.initial / 2 ** halvings


# ---------------------------------------------------------------- Adam


@dataclass
class AdamMoments:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "AdamMoments":
        return cls(0, {k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], moments: AdamMoments,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0, iteration: int | None = None):
    """Bias-corrected Adam. Returns (new_params, new_moments); inputs are not modified."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ArgumentError(f"gradient shape mismatch for {name}")
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient", iteration=iteration, parameter=name)
    t = moments.step + 1
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        m = beta1 * moments.m[name] + (1 - beta1) * g
        v = beta2 * moments.v[name] + (1 - beta2) * g * g
        new_p[name] = p - lr * (m / c1) / ((v / c2).sqrt() + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamMoments(t, new_m, new_v)


# ---------------------------------------------------------------- plan / state


def _desk_h2l() -> NetworkSpec:
    return NetworkSpec(H2L_GEN, base_channels=32, num_blocks=2)


def _desk_l2h() -> NetworkSpec:
    return NetworkSpec(L2H_GEN, base_channels=32, num_blocks=2, growth_channels=16)


@dataclass
class TrainPlan:
    stage: str = "H2L"
    iterations: int = 2000
    batch_size: int = 4
    patch_size: int = 96
    lr_schedule: LRSchedule = field(default_factory=LRSchedule)
    adam: AdamConfig = field(default_factory=AdamConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    d_steps_per_g_step: int = 1
    scale_factor: int = 4
    h2l: NetworkSpec = field(default_factory=_desk_h2l)
    l2h: NetworkSpec = field(default_factory=_desk_l2h)
    d_base_channels: int = 16
    d_max_blocks: int = 4
    feature: dict = field(default_factory=lambda: {"kind": "random"})
    noise_mean: float = 0.0
    noise_std: float = 0.05
    clean_fraction: float = 0.5
    checkpoint_every: int = 0
    deterministic: bool = True
    history_size: int = 200
    freeze: tuple[str, ...] = ()
    # joint stage: fraction of the Stage-B final learning rate used when lr_schedule.initial is None
    joint_lr_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.lr_schedule, dict):
            self.lr_schedule = LRSchedule(**self.lr_schedule)
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.h2l, dict):
            self.h2l = NetworkSpec.from_dict(self.h2l)
        if isinstance(self.l2h, dict):
            self.l2h = NetworkSpec.from_dict(self.l2h)
        self.freeze = tuple(self.freeze)
        self.validate()

    def validate(self):
        if self.stage not in STAGES:
            raise ArgumentError(f"unknown stage {self.stage!r}")
        if self.iterations <= 0:
            raise ArgumentError("iterations must be > 0")
        if self.batch_size < 1 or self.d_steps_per_g_step < 1:
            raise ArgumentError("batch_size and d_steps_per_g_step must be >= 1")
        if self.patch_size % self.scale_factor:
            raise ArgumentError("patch_size must be divisible by scale_factor")
        if self.h2l.scale_factor != self.scale_factor or self.l2h.scale_factor != self.scale_factor:
            raise SpecError("generator scale factors must equal the plan scale_factor")
        unknown = set(self.freeze) - set(NET_NAMES)
        if unknown:
            raise ArgumentError(f"unknown networks in freeze: {sorted(unknown)}")
        w = self.weights
        if self.stage == "H2L" and not any(w.for_stage("H2L")):
            raise ArgumentError("all H2L loss weights are zero")
        if self.stage == "L2H" and not any(w.for_stage("L2H")):
            raise ArgumentError("all L2H loss weights are zero")
        if self.stage == "JOINT" and not any(w.for_stage("H2L") + w.for_stage("L2H")):
            raise ArgumentError("all loss weights are zero")
        return self

    def d_spec(self, input_size: int) -> NetworkSpec:
        blocks = self.d_max_blocks
        while blocks > 1 and input_size % 2 ** blocks:
            blocks -= 1
        return NetworkSpec(DISCRIMINATOR, base_channels=self.d_base_channels, num_blocks=blocks,
                           input_size=input_size)

    def net_specs(self) -> dict[str, NetworkSpec]:
        return {
            "g_h2l": self.h2l,
            "d_h2l": self.d_spec(self.patch_size // self.scale_factor),
            "g_l2h": self.l2h,
            "d_l2h": self.d_spec(self.patch_size),
        }

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown plan fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper_scale(cls, stage: str, **overrides) -> "TrainPlan":
        """Full-size networks and hyperparameters; needs a GPU-scale budget."""
        d = dict(stage=stage, iterations=400_000, batch_size=16, patch_size=192,
                 h2l=NetworkSpec(H2L_GEN, base_channels=64, num_blocks=4),
                 l2h=NetworkSpec(L2H_GEN, base_channels=64, num_blocks=25, growth_channels=32),
                 d_base_channels=64, feature={"kind": "random", "base_channels": 64})
        d.update(overrides)
        return cls(**d)


@dataclass
class TrainState:
    plan: TrainPlan
    iteration: int
    nets: dict[str, NetworkState]
    moments: dict[str, AdamMoments]
    fx: FeatureExtractor
    history: deque = field(default_factory=deque)
    last_lr: float | None = None

    def trainable(self, name: str) -> bool:
        return name in self.moments and name not in self.plan.freeze


def _dtype(state: TrainState):
    return next(state.nets[next(iter(state.nets))].module.parameters()).dtype


def set_deterministic(enabled: bool = True):
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def init_train_state(plan: TrainPlan, init: dict[str, str | NetworkState] | None = None,
                     dtype=torch.float32) -> TrainState:
    """Fresh networks for the plan's stage, optionally seeded from checkpoints."""
    init = dict(init or {})
    specs = plan.net_specs()
    nets = {}
    for k, name in enumerate(NET_NAMES):
        if name not in STAGE_NETS[plan.stage]:
            continue
        src = init.get(name)
        if isinstance(src, NetworkState):
            net = src.clone()
        elif src is not None:
            net = load_checkpoint(src, kind=specs[name].kind)
        else:
            net = build_network(specs[name], iteration_seed(plan.seed, 0xBEEF, k), dtype)
        if net.spec.kind != specs[name].kind:
            raise SpecError(f"{name} must be a {specs[name].kind} network")
        net.module.to(dtype)
        nets[name] = net
    if plan.stage == "JOINT":
        missing = [n for n in ("g_h2l", "g_l2h") if n not in init]
        if missing:
            raise ArgumentError(f"joint fine-tuning needs pretrained {', '.join(missing)}")
    moments = {n: AdamMoments.zeros_like(_params(net)) for n, net in nets.items()
               if n not in plan.freeze}
    fx = FeatureExtractor.from_config(plan.feature, dtype)
    return TrainState(plan, 0, nets, moments, fx, deque(maxlen=plan.history_size))


def _params(net: NetworkState) -> dict[str, torch.Tensor]:
    return {k: p for k, p in net.module.named_parameters()}


def _apply_grads(state: TrainState, name: str, loss: torch.Tensor, lr: float, retain: bool = False):
    """Differentiate ``loss`` w.r.t. one network and take an Adam step on it."""
    net = state.nets[name]
    params = _params(net)
    grads = torch.autograd.grad(loss, list(params.values()), retain_graph=retain, allow_unused=True)
    grads = {k: torch.zeros_like(p) if g is None else g for (k, p), g in zip(params.items(), grads)}
    a = state.plan.adam
    new_p, state.moments[name] = adam_step(params, grads, state.moments[name], lr, a.beta1, a.beta2,
                                           a.eps, a.weight_decay, iteration=state.iteration)
    with torch.no_grad():
        for k, p in params.items():
            p.copy_(new_p[k])


def _check_loss(value: torch.Tensor, what: str, iteration: int):
    if not torch.isfinite(value):
        raise NumericError(f"non-finite {what} loss", iteration=iteration)


def _d_update(state: TrainState, name: str, real: torch.Tensor, fake: torch.Tensor, lr: float) -> float:
    d = state.nets[name].module
    loss = losses.discriminator_loss(d(real), d(fake.detach()))
    _check_loss(loss, f"{name} discriminator", state.iteration)
    if state.trainable(name):
        _apply_grads(state, name, loss, lr)
    return float(loss.detach())


def _generator_terms(pred, target, d_module, fx):
    return (losses.pixel_loss(pred, target), losses.feature_loss(pred, target, fx),
            losses.generator_gan_loss(d_module(pred)))


def _finish(state: TrainState, record: dict, lr: float):
    state.history.append(record)
    state.last_lr = lr
    state.iteration += 1


def _adversarial_step(state: TrainState, batch: Batch, stage: str, g_name: str, d_name: str,
                      generate, target, real):
    it = state.iteration
    plan = state.plan
    lr = lr_at(plan.lr_schedule, it)
    g, d = state.nets[g_name].module, state.nets[d_name].module
    d_loss = None
    for _ in range(plan.d_steps_per_g_step):
        with torch.no_grad():
            fake = generate(g)
        d_loss = _d_update(state, d_name, real, fake, lr)
    pred = generate(g)
    pix, feat, gan = _generator_terms(pred, target, d, state.fx)
    total = losses.weighted_total(pix, feat, gan, plan.weights, stage)
    _check_loss(total, f"{stage} generator", it)
    if state.trainable(g_name):
        _apply_grads(state, g_name, total, lr)
    report = losses.combine(pix, feat, gan, plan.weights, stage, d_loss).check_finite(it)
    _finish(state, report.record(it, lr), lr)
    return state, report


def train_h2l_step(state: TrainState, batch: Batch):
    """One discriminator update on (unpaired noisy crops vs generated LR), then one generator update."""
    if state.plan.stage != "H2L":
        raise ArgumentError(f"plan stage is {state.plan.stage}, not H2L")
    batch = batch.to(_dtype(state))
    return _adversarial_step(state, batch, "H2L", "g_h2l", "d_h2l",
                             lambda g: g(batch.hr, batch.noise), batch.lr, batch.unpaired)


def train_l2h_step(state: TrainState, batch: Batch):
    if state.plan.stage != "L2H":
        raise ArgumentError(f"plan stage is {state.plan.stage}, not L2H")
    batch = batch.to(_dtype(state))
    return _adversarial_step(state, batch, "L2H", "g_l2h", "d_l2h",
                             lambda g: g(batch.lr), batch.hr, batch.hr)


@dataclass(frozen=True)
class JointReport:
    h2l: LossReport
    l2h: LossReport

    @property
    def total(self) -> float:
        return self.h2l.total + self.l2h.total

    def check_finite(self, iteration=None):
        self.h2l.check_finite(iteration)
        self.l2h.check_finite(iteration)
        return self

    def record(self, iteration: int, lr: float | None = None) -> dict:
        rec = {"iter": iteration, "stage": "JOINT"}
        if lr is not None:
            rec["lr"] = lr
        for part in (self.h2l, self.l2h):
            r = part.record(iteration)
            del r["iter"], r["stage"]
            rec[part.stage.lower()] = r
        rec["total"] = self.total
        return rec


def joint_generator_loss(g_h2l, g_l2h, d_h2l, d_l2h, fx, batch: Batch, weights: LossWeights):
    """Composed objective: H2L terms on G_H2L(HR_c, N), L2H terms on G_L2H(G_H2L(HR_c, N)).

    Returns (total, h2l_terms, l2h_terms); gradients of ``total`` reach both generators.
    """
    lr_fake = g_h2l(batch.hr, batch.noise)
    hr_fake = g_l2h(lr_fake)
    h2l_terms = _generator_terms(lr_fake, batch.lr, d_h2l, fx)
    l2h_terms = _generator_terms(hr_fake, batch.hr, d_l2h, fx)
    total = (losses.weighted_total(*h2l_terms, weights, "H2L")
             + losses.weighted_total(*l2h_terms, weights, "L2H"))
    return total, h2l_terms, l2h_terms


def train_joint_step(state: TrainState, batch: Batch):
    """Update both discriminators, then both generators through the composed H2L -> L2H graph."""
    plan = state.plan
    if plan.stage != "JOINT":
        raise ArgumentError(f"plan stage is {plan.stage}, not JOINT")
    batch = batch.to(_dtype(state))
    it = state.iteration
    lr = lr_at(plan.lr_schedule, it)
    n = {k: v.module for k, v in state.nets.items()}
    d1 = d2 = None
    for _ in range(plan.d_steps_per_g_step):
        with torch.no_grad():
            lr_fake = n["g_h2l"](batch.hr, batch.noise)
            hr_fake = n["g_l2h"](lr_fake)
        d1 = _d_update(state, "d_h2l", batch.unpaired, lr_fake, lr)
        d2 = _d_update(state, "d_l2h", batch.hr, hr_fake, lr)
    total, h_terms, l_terms = joint_generator_loss(n["g_h2l"], n["g_l2h"], n["d_h2l"], n["d_l2h"],
                                                   state.fx, batch, plan.weights)
    _check_loss(total, "joint generator", it)
    gens = [g for g in ("g_h2l", "g_l2h") if state.trainable(g)]
    if gens:
        params = {(g, k): p for g in gens for k, p in _params(state.nets[g]).items()}
        grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
        for g in gens:
            ps = {k: p for (gg, k), p in params.items() if gg == g}
            gs = {k: torch.zeros_like(ps[k]) if gr is None else gr
                  for ((gg, k), _), gr in zip(params.items(), grads) if gg == g}
            a = plan.adam
            new_p, state.moments[g] = adam_step(ps, gs, state.moments[g], lr, a.beta1, a.beta2,
                                                a.eps, a.weight_decay, iteration=it)
            with torch.no_grad():
                for k, p in ps.items():
                    p.copy_(new_p[k])
    report = JointReport(losses.combine(*h_terms, plan.weights, "H2L", d1),
                         losses.combine(*l_terms, plan.weights, "L2H", d2)).check_finite(it)
    _finish(state, report.record(it, lr), lr)
    return state, report


STEP_FNS = {"H2L": train_h2l_step, "L2H": train_l2h_step, "JOINT": train_joint_step}


# ---------------------------------------------------------------- persistence


def _net_payload(net: NetworkState) -> dict:
    return {"spec": json.dumps(net.spec.to_dict(), sort_keys=True), "init_seed": net.init_seed,
            "parameters": {k: v.detach().clone() for k, v in net.module.state_dict().items()}}


def save_train_state(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": STATE_FORMAT,
        "version": STATE_VERSION,
        "plan": json.dumps(state.plan.to_dict(), sort_keys=True),
        "iteration": state.iteration,
        "last_lr": state.last_lr,
        "nets": {k: _net_payload(v) for k, v in state.nets.items()},
        "moments": {k: {"step": m.step, "m": m.m, "v": m.v} for k, m in state.moments.items()},
        "history": json.dumps(list(state.history)),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_train_state(path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no such training state: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != STATE_FORMAT or payload.get("version") != STATE_VERSION:
        raise FormatError(f"{path} is not a version-{STATE_VERSION} training state")
    plan = TrainPlan.from_dict(json.loads(payload["plan"]))
    nets = {}
    for name, p in payload["nets"].items():
        params = p["parameters"]
        dtype = next(iter(params.values())).dtype
        net = build_network(NetworkSpec.from_dict(json.loads(p["spec"])), p["init_seed"], dtype)
        net.module.load_state_dict(params, strict=True)
        nets[name] = net
    moments = {k: AdamMoments(m["step"], m["m"], m["v"]) for k, m in payload["moments"].items()}
    dtype = next(iter(nets.values())).module.parameters().__next__().dtype
    fx = FeatureExtractor.from_config(plan.feature, dtype)
    history = deque(json.loads(payload["history"]), maxlen=plan.history_size)
    return TrainState(plan, payload["iteration"], nets, moments, fx, history, payload["last_lr"])


def _checkpoint_meta(state: TrainState) -> dict:
    return {"stage": state.plan.stage, "iteration": state.iteration, "lr": state.last_lr}


def _resolve_joint_lr(plan: TrainPlan, init: dict) -> TrainPlan:
    if plan.stage != "JOINT" or plan.lr_schedule.initial is not None:
        return plan
    base = None
    src = init.get("g_l2h")
    if isinstance(src, (str, Path)):
        payload = torch.load(src, map_location="cpu", weights_only=True)
        base = (payload.get("meta") or {}).get("lr")
    if base is None:
        base = LRSchedule().initial
    sched = LRSchedule(base * plan.joint_lr_fraction, plan.lr_schedule.halve_at)
    return dataclasses.replace(plan, lr_schedule=sched)


def run(plan: TrainPlan, manifest: PairManifest, out_dir, init: dict | None = None,
        resume_from=None, progress=None) -> TrainState:
    """Execute ``plan`` to completion, writing logs/ and checkpoints/ under ``out_dir``.

    ``resume_from`` is a training-state file written by an earlier run of the
    same plan; the log is truncated back to that iteration before continuing.
    """
    out_dir = Path(out_dir)
    ckpt_dir, log_dir = out_dir / "checkpoints", out_dir / "logs"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_dir.mkdir(parents=True, exist_ok=True)
    set_deterministic(plan.deterministic)
    init = dict(init or {})
    if resume_from is not None:
        state = load_train_state(resume_from)
        state.plan = dataclasses.replace(state.plan, iterations=plan.iterations,
                                         checkpoint_every=plan.checkpoint_every)
    else:
        plan = _resolve_joint_lr(plan, init)
        state = init_train_state(plan, init)
    plan = state.plan
    log_path = log_dir / f"train_{plan.stage.lower()}.jsonl"
    kept = []
    if resume_from is not None and log_path.exists():
        kept = [ln for ln in log_path.read_text().splitlines()
                if ln.strip() and json.loads(ln)["iter"] < state.iteration]
    log_path.write_text("".join(ln + "\n" for ln in kept))
    step = STEP_FNS[plan.stage]
    noise = NoiseSpec(plan.noise_mean, plan.noise_std)
    batch_stage = "L2H" if plan.stage == "L2H" else "H2L"
    with open(log_path, "a") as fh:
        while state.iteration < plan.iterations:
            it = state.iteration
            batch = sample_batch(manifest, plan.batch_size, plan.patch_size, batch_stage,
                                 iteration_seed(plan.seed, it), plan.clean_fraction, noise)
            state, report = step(state, batch)
            fh.write(json.dumps(state.history[-1]) + "\n")
            fh.flush()
            if progress is not None:
                progress(it, report)
            if plan.checkpoint_every and state.iteration % plan.checkpoint_every == 0:
                save_train_state(state, ckpt_dir / f"train_state_{state.iteration:07d}.pt")
    save_train_state(state, ckpt_dir / "train_state_final.pt")
    meta = _checkpoint_meta(state)
    for name, net in state.nets.items():
        save_checkpoint(net, ckpt_dir / f"{name}_final.pt", meta=meta)
    return state


def read_log(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
