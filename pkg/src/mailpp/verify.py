"""Independent oracles: finite differences, fusion equivalence, counting.

Everything here deliberately avoids the code paths it checks. Finite
differences probe the tape's gradients; the dual-path fusion check runs
hooked and folded models side by side; the closed-form parameter
counter never instantiates a site, so it can be cross-checked against
an enumeration of actually allocated arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from . import rng as rngmod
from .agents import (
    CoupledAgentSite,
    CouplingMode,
    SiteKey,
    build_scaling_map,
    build_sites,
    fuse_model,
    hook_set,
    trainable_param_count,
)
from .autodiff import NonFiniteError, Tape, Tensor
from .encoder import (
    ALL_POSITIONS,
    BLOCK_POSITIONS,
    DualEncoder,
    EncoderConfig,
    Position,
    image_forward,
    init_dual_encoder,
    text_forward,
)

__all__ = [
    "CheckReport",
    "finite_diff_grad",
    "relative_error",
    "check_identity_at_init",
    "check_fusion_equivalence",
    "count_trainable_params",
    "gradient_check",
    "CHECK_CSV_HEADER",
]

CHECK_CSV_HEADER = "name,passed,worst_error,tolerance,trials,seed,detail"

PARAM_CLASSES = ("a", "b", "w_up", "w_down", "a_m")


@dataclass
class CheckReport:
    name: str
    worst_error: float
    tolerance: float
    trials: int
    seed: int
    detail: str = ""

    @property
    def passed(self) -> bool:
        if self.trials == 0:
            return True  # vacuous; flagged via detail
        return self.worst_error <= self.tolerance

    def human_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  [{self.detail}]" if self.detail else ""
        return (
            f"{status}  {self.name}: worst error {self.worst_error:.3e} "
            f"(tol {self.tolerance:.1e}, {self.trials} trials, seed {self.seed}){extra}"
        )

    def csv_row(self) -> str:
        detail = self.detail.replace(",", ";")
        return (
            f"{self.name},{str(self.passed).lower()},{self.worst_error:.10g},"
            f"{self.tolerance:.10g},{self.trials},{self.seed},{detail}"
        )


def _vacuous(report: CheckReport) -> CheckReport:
    if report.trials == 0 and not report.detail:
        report.detail = "no trials"
    return report


# ------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[np.ndarray], float], x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, in f64."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.empty_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0))
        flat[i] = orig - h
        fm = float(f(x0))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(g1: np.ndarray, g2: np.ndarray) -> float:
    """max |g1 - g2| / max(1, |g1|, |g2|), elementwise; robust near zero."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(g1), np.abs(g2)))
    if g1.size == 0:
        return 0.0
    return float(np.max(np.abs(g1 - g2) / denom))


# ------------------------------------------------------------------
# shared helpers


def random_toy_model(seed: int, dtype=np.float64, max_blocks: int = 4) -> DualEncoder:
    """A small random frozen model with varied dimensions, deterministic per seed."""
    gen = rngmod.derive(seed, "toy-model")
    heads = int(gen.choice([1, 2]))
    l_blocks = int(gen.integers(1, max_blocks + 1))
    d_t = heads * int(gen.choice([4, 6, 8]))
    d_v = heads * int(gen.choice([6, 8, 10]))
    cfg = EncoderConfig(
        L=l_blocks,
        d_t=d_t,
        d_v=d_v,
        n_heads=heads,
        N_t=6,
        N_v=5,
        mlp_ratio=2,
        vocab_size=32,
    )
    return init_dual_encoder(cfg, rngmod.derive(seed, "toy-weights"), dtype)


def random_inputs(cfg: EncoderConfig, gen: np.random.Generator, dtype) -> tuple[np.ndarray, np.ndarray]:
    n = int(gen.integers(2, cfg.N_t + 1))
    tokens = gen.integers(0, cfg.vocab_size, size=n)
    patches = gen.standard_normal((cfg.N_v, cfg.d_v)).astype(dtype)
    return tokens, patches


def randomize_sites(sites: Mapping[SiteKey, CoupledAgentSite], gen: np.random.Generator, spread: float = 0.2) -> None:
    """Perturb every trainable array in place (W_up included, so bridges are active)."""
    for site in sites.values():
        for local, arr in list(site.params()):
            if local.endswith("/a") or local.endswith("a_m") or local.endswith("b_m"):
                new = 1.0 + spread * gen.standard_normal(arr.shape)
            elif local.endswith("/b"):
                new = spread * gen.standard_normal(arr.shape)
            elif local.endswith("w_up"):
                new = spread * gen.standard_normal(arr.shape) / np.sqrt(arr.shape[-1])
            else:  # w_down keeps its scale
                new = gen.standard_normal(arr.shape) / np.sqrt(arr.shape[-1])
            site.set_param(local, new.astype(arr.dtype))


# ------------------------------------------------------------------
# identity at initialization


def check_identity_at_init(
    model: DualEncoder,
    modes: Iterable[CouplingMode] = tuple(CouplingMode),
    n_inputs: int = 4,
    seed: int = 0,
    rank: int = 2,
    d_m: int = 4,
) -> CheckReport:
    """Hooked output must equal frozen output bit for bit with fresh sites."""
    worst = 0.0
    trials = 0
    detail = ""
    gen = rngmod.derive(seed, "identity-inputs")
    for mode in modes:
        sites = build_sites(
            model.cfg, CouplingMode(mode), rank, d_m, rngmod.derive(seed, "identity-sites", str(mode)), model.dtype
        )
        hooks = hook_set(sites)
        scalings = build_scaling_map(sites)
        for _ in range(n_inputs):
            tokens, patches = random_inputs(model.cfg, gen, model.dtype)
            plain_t = text_forward(tokens, model.cfg, model.text).data
            hooked_t = text_forward(tokens, model.cfg, model.text, hooks, scalings).data
            plain_v = image_forward(patches, model.cfg, model.image).data
            hooked_v = image_forward(patches, model.cfg, model.image, hooks, scalings).data
            err = max(
                float(np.max(np.abs(plain_t - hooked_t))),
                float(np.max(np.abs(plain_v - hooked_v))),
            )
            trials += 1
            if err > worst:
                worst = err
                detail = f"mode={CouplingMode(mode).value}"
    report = CheckReport(
        name="identity_at_init",
        worst_error=worst,
        tolerance=0.0,
        trials=trials,
        seed=seed,
        detail=detail if worst > 0 else "",
    )
    return _vacuous(report)


# ------------------------------------------------------------------
# fusion equivalence


def _locate_fused_mismatch(expected: DualEncoder, got: DualEncoder) -> str:
    exp = dict(expected.named_tensors())
    for name, arr in got.named_tensors():
        ref = exp.get(name)
        if ref is None or ref.shape != arr.shape or not np.array_equal(ref, arr):
            return name
    return ""


def check_fusion_equivalence(
    model: DualEncoder,
    sites: Mapping[SiteKey, CoupledAgentSite],
    n_inputs: int = 8,
    tol: float = 1e-10,
    seed: int = 0,
    fused: DualEncoder | None = None,
) -> CheckReport:
    """Dual-path oracle: hooked forward vs folded forward on random inputs."""
    reference = fuse_model(model, sites)
    target = fused if fused is not None else reference
    hooks = hook_set(sites)
    scalings = build_scaling_map(sites)
    gen = rngmod.derive(seed, "fusion-inputs")
    worst = 0.0
    detail = ""
    for _ in range(n_inputs):
        tokens, patches = random_inputs(model.cfg, gen, model.dtype)
        hooked_t = text_forward(tokens, model.cfg, model.text, hooks, scalings).data
        fused_t = text_forward(tokens, target.cfg, target.text).data
        hooked_v = image_forward(patches, model.cfg, model.image, hooks, scalings).data
        fused_v = image_forward(patches, target.cfg, target.image).data
        err = max(relative_error(hooked_t, fused_t), relative_error(hooked_v, fused_v))
        worst = max(worst, err)
    if worst > tol and fused is not None:
        bad = _locate_fused_mismatch(reference, fused)
        if bad:
            detail = f"fused tensor mismatch at {bad}"
    return _vacuous(
        CheckReport(
            name="fusion_equivalence",
            worst_error=worst,
            tolerance=tol,
            trials=n_inputs,
            seed=seed,
            detail=detail,
        )
    )


# ------------------------------------------------------------------
# parameter counting (closed form; independent of site construction)


def count_trainable_params(
    cfg: EncoderConfig,
    mode: CouplingMode,
    rank: int,
    d_m: int,
    bridge_shift: bool = False,
    positions: tuple[Position, ...] = ALL_POSITIONS,
) -> tuple[int, dict[str, int]]:
    """Total trainable parameters and a per-site breakdown, by arithmetic alone."""
    mode = CouplingMode(mode)
    breakdown: dict[str, int] = {}
    keys = [SiteKey(i, p) for i in range(cfg.L) for p in BLOCK_POSITIONS if p in positions]
    keys += [SiteKey(None, p) for p in ("4", "5") if p in positions]
    for key in keys:
        w_v = cfg.hook_width("image", key.pos)
        w_t = cfg.hook_width("text", key.pos)
        n = 2 * (w_v + w_t)  # both agents' a and b
        if mode == CouplingMode.TEXT_TO_IMAGE:
            n += rank * (w_t + w_v)
        elif mode == CouplingMode.IMAGE_TO_TEXT:
            n += rank * (w_v + w_t)
        elif mode == CouplingMode.BIDIRECTIONAL:
            n += d_m + rank * (w_v + d_m) + rank * (w_t + d_m)
        if bridge_shift:
            if mode == CouplingMode.TEXT_TO_IMAGE:
                n += rank * (w_t + w_v)
            elif mode == CouplingMode.IMAGE_TO_TEXT:
                n += rank * (w_v + w_t)
            elif mode == CouplingMode.BIDIRECTIONAL:
                n += d_m + rank * (w_v + d_m) + rank * (w_t + d_m)
        breakdown[str(key)] = n
    return sum(breakdown.values()), breakdown


def check_counter_agreement(
    cfg: EncoderConfig,
    mode: CouplingMode,
    rank: int,
    d_m: int,
    bridge_shift: bool = False,
    positions: tuple[Position, ...] = ALL_POSITIONS,
    seed: int = 0,
) -> CheckReport:
    """Closed-form count vs enumeration of actually allocated arrays."""
    total, _ = count_trainable_params(cfg, mode, rank, d_m, bridge_shift, positions)
    sites = build_sites(
        cfg, mode, rank, d_m, rngmod.derive(seed, "count-sites"), np.float32, bridge_shift, positions
    )
    enumerated = trainable_param_count(sites)
    err = float(abs(total - enumerated))
    return CheckReport(
        name=f"param_count_agreement[{CouplingMode(mode).value}]",
        worst_error=err,
        tolerance=0.0,
        trials=1,
        seed=seed,
        detail="" if err == 0 else f"closed-form {total} vs enumerated {enumerated}",
    )


# ------------------------------------------------------------------
# gradient fidelity


def _flatten(params: Mapping[str, np.ndarray]) -> tuple[np.ndarray, list[tuple[str, slice, tuple[int, ...]]]]:
    layout = []
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = params[name]
        layout.append((name, slice(offset, offset + arr.size), arr.shape))
        chunks.append(arr.reshape(-1))
        offset += arr.size
    return np.concatenate(chunks).astype(np.float64), layout


def _param_class(name: str) -> str:
    leaf = name.rsplit("/", 1)[-1]
    if leaf == "b_m":
        leaf = "a_m"
    return leaf


def gradient_check(
    model: DualEncoder,
    sites: dict[SiteKey, CoupledAgentSite],
    loss_of_params: Callable[[Mapping[str, Tensor] | None], Tensor],
    h: float = 1e-5,
    seed: int = 0,
) -> list[CheckReport]:
    """Backward vs central differences, reported per trainable parameter class.

    ``loss_of_params`` maps a name->Tensor dict (or None for current site
    values) to a scalar loss tensor; it is evaluated both on a tape and
    pointwise for the differences.
    """
    base: dict[str, np.ndarray] = {}
    for key, site in sites.items():
        for local, arr in site.params():
            base[f"{key}/{local}"] = arr.astype(np.float64)
    x0, layout = _flatten(base)

    def unflatten(x: np.ndarray) -> dict[str, np.ndarray]:
        return {name: x[sl].reshape(shape) for name, sl, shape in layout}

    def f(x: np.ndarray) -> float:
        values = {name: Tensor(arr) for name, arr in unflatten(x).items()}
        return loss_of_params(values).item()

    tape = Tape()
    leaves = {name: tape.leaf(arr) for name, arr in base.items()}
    loss = loss_of_params(leaves)
    grads = tape.backward(loss)
    analytic = np.empty_like(x0)
    for name, sl, shape in layout:
        analytic[sl] = grads[leaves[name].node].data.reshape(-1)

    numeric = finite_diff_grad(f, x0, h)

    reports = []
    for cls in PARAM_CLASSES:
        sls = [sl for name, sl, _ in layout if _param_class(name) == cls]
        if not sls:
            reports.append(
                CheckReport(
                    name=f"grad_fd[{cls}]", worst_error=0.0, tolerance=1e-4, trials=0, seed=seed, detail="no trials"
                )
            )
            continue
        worst = max(relative_error(analytic[sl], numeric[sl]) for sl in sls)
        n = sum(sl.stop - sl.start for sl in sls)
        reports.append(CheckReport(name=f"grad_fd[{cls}]", worst_error=worst, tolerance=1e-4, trials=n, seed=seed))
    return reports
