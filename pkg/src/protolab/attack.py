"""Location-shift ("head on stomach") attack on a prototype's similarity map.

The attack maximises the mean similarity over a target cell set minus the
mean similarity over the source cell set, by L-inf projected sign-gradient
ascent on a perturbation that is confined to the input receptive field of
both cell sets.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import BACKBONE_LAYERS, ProtoPNet, distance_term

Cell = tuple[int, int]


class ProtocolError(ValueError):
    """An experiment precondition does not hold (e.g. misclassified input)."""


@dataclass(frozen=True)
class AttackConfig:
    budget: float = 8 / 255
    step: float = 2 / 255
    iterations: int = 40
    mask_mode: str = "receptive_field"
    source_rule: str = "argmax_ties"
    top_n: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.budget < 0 or self.step < 0:
            raise ValueError("budget and step must be non-negative")
        if self.step > self.budget and self.budget > 0:
            raise ValueError(f"step {self.step} exceeds budget {self.budget}")
        if self.mask_mode not in ("receptive_field", "full_image"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.source_rule not in ("argmax_ties", "top_n"):
            raise ValueError(f"unknown source_rule {self.source_rule!r}")


@dataclass(frozen=True)
class SusceptibilityConfig:
    k: int = 5
    n_images: int = 50
    step: float = 2 / 255
    budget: float = 8 / 255
    iterations: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.n_images < 1:
            raise ValueError("k and n_images must be at least 1")

    def attack_config(self) -> AttackConfig:
        return AttackConfig(budget=self.budget, step=self.step, iterations=self.iterations)


@dataclass
class AttackResult:
    image_id: str
    prototype: int
    source: list[Cell]
    target: list[Cell]
    delta: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    budget: float
    iterations: int
    best_iteration: int
    objective_before: float
    objective_after: float
    source_max_before: float
    source_max_after: float
    target_max_before: float
    target_max_after: float
    pooled_before: float
    pooled_after: float
    location_before: Cell
    location_after: Cell
    label: int
    predicted_before: int
    predicted_after: int
    success: bool

    def record(self) -> dict:
        """JSON-ready summary; the perturbation is summarised, not embedded."""
        d = asdict(self)
        d.pop("delta")
        d.pop("mask")
        d["delta_linf"] = float(np.max(np.abs(self.delta), initial=0.0))
        d["delta_off_mask_linf"] = float(np.max(np.abs(self.delta * (1.0 - self.mask)), initial=0.0))
        d["source"] = [list(c) for c in self.source]
        d["target"] = [list(c) for c in self.target]
        d["location_before"] = list(self.location_before)
        d["location_after"] = list(self.location_after)
        return d


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class ReceptiveField:
    size: int
    jump: int
    start: float  # input-pixel centre of latent cell 0


def receptive_field(layers: Sequence[tuple[str, int, int, int]] = BACKBONE_LAYERS) -> ReceptiveField:
    """Compose per-layer (kernel, stride, padding) into the latent cell geometry."""
    size, jump, start = 1, 1, 0.5
    for _, k, s, p in layers:
        size += (k - 1) * jump
        start += ((k - 1) / 2.0 - p) * jump
        jump *= s
    return ReceptiveField(size, jump, start)


def cell_extent(cell: Cell, rf: ReceptiveField, image_dims: tuple[int, int]) -> tuple[int, int, int, int]:
    """Half-open pixel rectangle ``(y0, y1, x0, x1)`` seen by one latent cell, clipped to the image."""
    out = []
    for coord, limit in zip(cell, image_dims):
        centre = rf.start + coord * rf.jump  # in continuous pixel coordinates
        lo = int(np.floor(centre - rf.size / 2.0 + 1e-9))
        out.extend((max(lo, 0), min(lo + rf.size, limit)))
    return out[0], out[1], out[2], out[3]


def receptive_field_mask(cells: Iterable[Cell], image_dims: tuple[int, int],
                         layers: Sequence[tuple[str, int, int, int]] = BACKBONE_LAYERS) -> np.ndarray:
    rf = receptive_field(layers)
    mask = np.zeros(image_dims)
    for cell in cells:
        y0, y1, x0, x1 = cell_extent(cell, rf, image_dims)
        mask[y0:y1, x0:x1] = 1.0
    return mask


# ---------------------------------------------------------------------------
# objective


def prototype_map(model: ProtoPNet, images, prototype: int | Sequence[int]) -> Tensor:
    """Similarity map of selected prototype(s); batched images pair with a prototype list."""
    latent = model.embed(images)
    cfg = model.config
    if latent.ndim == 3:
        protos = ad.getitem(model.bank.vectors, (slice(prototype, prototype + 1),))
        d = distance_term(latent, protos, cfg.distance_mode)
        return ad.log_similarity(d, cfg.epsilon_stab)[0]
    protos = model.bank.vectors.data[np.asarray(prototype)]
    # per-image prototype: compute against all selected, keep the diagonal
    d = distance_term(latent, Tensor(protos), cfg.distance_mode)
    n = latent.shape[0]
    diag = ad.getitem(d, (np.arange(n), np.arange(n)))
    return ad.log_similarity(diag, cfg.epsilon_stab)


def _cells_index(cells: Sequence[Cell]) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def objective_from_map(sim: Tensor, source: Sequence[Cell], target: Sequence[Cell]) -> Tensor:
    sr, sc = _cells_index(source)
    tr, tc = _cells_index(target)
    return ad.mean(ad.getitem(sim, (tr, tc))) - ad.mean(ad.getitem(sim, (sr, sc)))


def _check_disjoint(source, target) -> None:
    if not source or not target:
        raise ValueError("source and target cell sets must be non-empty")
    overlap = set(map(tuple, source)) & set(map(tuple, target))
    if overlap:
        raise ValueError(f"source and target cell sets overlap at {sorted(overlap)}")


def location_shift_objective(model: ProtoPNet, image, source: Sequence[Cell], target: Sequence[Cell],
                             prototype: int, check_overlap: bool = True) -> Tensor:
    """Mean target-cell similarity minus mean source-cell similarity."""
    if check_overlap:
        _check_disjoint(source, target)
    return objective_from_map(prototype_map(model, image, prototype), source, target)


# ---------------------------------------------------------------------------
# source selection


def _require_correct(model: ProtoPNet, image: np.ndarray, label: int | None) -> int:
    pred = int(model.predict(image))
    if label is not None and pred != label:
        raise ProtocolError(f"image is misclassified (label {label}, predicted {pred})")
    return pred


def source_cells_from_map(sim: np.ndarray, rule: str = "argmax_ties", top_n: int = 1) -> list[Cell]:
    sim = np.asarray(sim)
    if rule == "argmax_ties":
        rows, cols = np.nonzero(sim == sim.max())
        return [(int(r), int(c)) for r, c in zip(rows, cols)]
    if rule == "top_n":
        order = np.argsort(-sim.reshape(-1), kind="stable")[:top_n]
        return [divmod(int(i), sim.shape[1]) for i in order]
    raise ValueError(f"unknown source rule {rule!r}")


def select_source_patch(model: ProtoPNet, image: np.ndarray, prototype: int, label: int | None = None,
                        rule: str = "argmax_ties", top_n: int = 1) -> list[Cell]:
    """Cells where ``prototype`` is most strongly found in ``image``.

    Raises:
        ProtocolError: if ``label`` is given and the model misclassifies the image.
    """
    _require_correct(model, image, label)
    return source_cells_from_map(prototype_map(model, image, prototype).data, rule, top_n)


def complement(cells: Sequence[Cell], shape: tuple[int, int]) -> list[Cell]:
    taken = set(map(tuple, cells))
    return [(r, c) for r in range(shape[0]) for c in range(shape[1]) if (r, c) not in taken]


# ---------------------------------------------------------------------------
# PGD


@dataclass
class AttackJob:
    image: np.ndarray
    label: int
    prototype: int
    source: list[Cell]
    target: list[Cell]
    image_id: str = ""


def _mask_for(job: AttackJob, config: AttackConfig, image_dims) -> np.ndarray:
    if config.mask_mode == "full_image":
        return np.ones(image_dims)
    return receptive_field_mask(list(job.source) + list(job.target), image_dims)


def _evaluate(model: ProtoPNet, images: np.ndarray, jobs: Sequence[AttackJob], need_grad: bool):
    """Objective value per job and, optionally, its gradient w.r.t. the images."""
    x = Tensor(images, requires_grad=need_grad)
    saved = {n: t.requires_grad for n, t in model.params.items()}
    model.params.set_trainable(())
    try:
        with Tape() as tape:
            sim = prototype_map(model, x, [j.prototype for j in jobs])
            objectives = [objective_from_map(sim[i], j.source, j.target) for i, j in enumerate(jobs)]
            total = objectives[0]
            for o in objectives[1:]:
                total = total + o
        if need_grad:
            ad.backward(tape, total)
    finally:
        for n, flag in saved.items():
            model.params[n].requires_grad = flag
    values = np.array([o.item() for o in objectives])
    return values, (x.grad if need_grad else None), sim.data


def _assert_constraints(delta, masks, attacked, budget, tol: float = 1e-12) -> None:
    # these hold by construction; a failure means a bug in the projection
    if np.max(np.abs(delta), initial=0.0) > budget + tol:
        raise AssertionError("perturbation exceeds the L-inf budget")
    if np.any(delta * (1.0 - masks) != 0.0):
        raise AssertionError("perturbation leaks outside the mask")
    if attacked.min(initial=0.0) < -tol or attacked.max(initial=1.0) > 1.0 + tol:
        raise AssertionError("attacked image leaves [0, 1]")


def pgd_location_shift_batch(model: ProtoPNet, jobs: Sequence[AttackJob], config: AttackConfig) -> list[AttackResult]:
    """Run independent location-shift attacks together (one image per job)."""
    for job in jobs:
        _check_disjoint(job.source, job.target)
    dims = (model.config.image_height, model.config.image_width)
    images = np.stack([np.asarray(j.image, dtype=np.float64) for j in jobs])
    masks = np.stack([_mask_for(j, config, dims) for j in jobs])[:, None]  # broadcast over channels
    delta = np.zeros_like(images)
    best_delta = delta.copy()
    values, grad, sim0 = _evaluate(model, images, jobs, config.iterations > 0)
    start_values = values.copy()
    best_values = values.copy()
    best_iter = np.zeros(len(jobs), dtype=np.int64)
    for it in range(1, config.iterations + 1):
        delta = np.clip(delta + config.step * np.sign(grad) * masks, -config.budget, config.budget)
        delta = (np.clip(images + delta, 0.0, 1.0) - images) * masks
        delta = np.clip(delta, -config.budget, config.budget)  # the subtraction can round one ulp past the budget
        values, grad, _ = _evaluate(model, images + delta, jobs, it < config.iterations)
        better = values > best_values
        best_values[better] = values[better]
        best_delta[better] = delta[better]
        best_iter[better] = it

    attacked = images + best_delta
    _assert_constraints(best_delta, masks, attacked, config.budget)
    _, _, sim1 = _evaluate(model, attacked, jobs, False)
    pred0 = model.predict(images)
    pred1 = model.predict(attacked)
    results = []
    for i, job in enumerate(jobs):
        sr, sc = _cells_index(job.source)
        tr, tc = _cells_index(job.target)
        loc0 = divmod(int(np.argmax(sim0[i])), sim0.shape[-1])
        loc1 = divmod(int(np.argmax(sim1[i])), sim1.shape[-1])
        src_after, tgt_after = float(sim1[i][sr, sc].max()), float(sim1[i][tr, tc].max())
        results.append(AttackResult(
            image_id=job.image_id, prototype=int(job.prototype),
            source=[tuple(map(int, c)) for c in job.source], target=[tuple(map(int, c)) for c in job.target],
            delta=best_delta[i], mask=masks[i, 0], budget=config.budget, iterations=config.iterations,
            best_iteration=int(best_iter[i]),
            objective_before=float(start_values[i]), objective_after=float(best_values[i]),
            source_max_before=float(sim0[i][sr, sc].max()), source_max_after=src_after,
            target_max_before=float(sim0[i][tr, tc].max()), target_max_after=tgt_after,
            pooled_before=float(sim0[i].max()), pooled_after=float(sim1[i].max()),
            location_before=loc0, location_after=loc1, label=int(job.label),
            predicted_before=int(pred0[i]), predicted_after=int(pred1[i]),
            success=bool(tgt_after > src_after),
        ))
    return results


def pgd_location_shift(model: ProtoPNet, image: np.ndarray, prototype: int, source: Sequence[Cell],
                       target: Sequence[Cell], config: AttackConfig = AttackConfig(), label: int | None = None,
                       image_id: str = "") -> AttackResult:
    """Maximise the location-shift objective under an L-inf budget.

    Starts from a zero perturbation, keeps it inside the mask and the image
    inside [0, 1] at every step, and returns the best iterate by objective.
    """
    pred = _require_correct(model, image, label)
    job = AttackJob(np.asarray(image, dtype=np.float64), pred if label is None else label, prototype,
                    list(source), list(target), image_id)
    return pgd_location_shift_batch(model, [job], config)[0]


# ---------------------------------------------------------------------------
# susceptibility


@dataclass
class SusceptibilityResult:
    rate: float
    n_images: int
    image_success: list[bool]
    attacks: list[AttackResult]

    @property
    def still_correct_fraction(self) -> float:
        """Among successful attacks, the share whose image stays correctly classified."""
        ok = [a for a in self.attacks if a.success]
        return float(np.mean([a.predicted_after == a.label for a in ok])) if ok else float("nan")


def sample_candidates(models: Sequence[ProtoPNet], images: np.ndarray, labels: np.ndarray, n_images: int,
                      seed: int) -> np.ndarray:
    """Sorted indices of up to ``n_images`` images that every model classifies correctly.

    Sharing one image set lets success rates of several models be compared directly.
    """
    labels = np.asarray(labels)
    ok = np.ones(len(labels), dtype=bool)
    for model in models:
        ok &= model.predict(images) == labels
    correct = np.flatnonzero(ok)
    take = min(n_images, len(correct))
    if not take:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.random.default_rng(seed).choice(correct, size=take, replace=False))


def susceptibility_rate(model: ProtoPNet, images: np.ndarray, labels: np.ndarray, config: SusceptibilityConfig,
                        ids: Sequence[str] | None = None, candidates: np.ndarray | None = None) -> SusceptibilityResult:
    """Share of correctly classified images whose top-k prototypes can be relocated.

    ``candidates`` fixes the image subset (indices into ``images``); otherwise
    ``n_images`` correctly classified images are drawn uniformly with the
    configured seed.
    """
    labels = np.asarray(labels)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(labels))]
    if candidates is None:
        candidates = sample_candidates([model], images, labels, config.n_images, config.seed)
    attack_cfg = config.attack_config()
    hw = model.config.latent_hw
    attacks: list[AttackResult] = []
    image_success: list[bool] = []
    for idx in candidates:
        image = np.asarray(images[idx], dtype=np.float64)
        scores = model.pooled_scores(image)
        top = np.argsort(-scores, kind="stable")[: config.k]
        sims = prototype_map(model, np.repeat(image[None], len(top), axis=0), top).data
        jobs = []
        for proto, sim in zip(top, sims):
            source = source_cells_from_map(sim, "argmax_ties")
            jobs.append(AttackJob(image, int(labels[idx]), int(proto), source, complement(source, hw), ids[idx]))
        results = pgd_location_shift_batch(model, jobs, attack_cfg)
        attacks.extend(results)
        image_success.append(any(r.success for r in results))
    n = len(image_success)
    rate = float(np.mean(image_success)) if n else 0.0
    return SusceptibilityResult(rate, n, image_success, attacks)


# ---------------------------------------------------------------------------
# post-hoc validation of emitted records


def validate_record(record: dict, tol: float = 1e-12) -> list[str]:
    """Constraint violations recorded in one attack JSON record (empty if clean)."""
    problems = []
    if record["delta_linf"] > record["budget"] + tol:
        problems.append(f"L-inf {record['delta_linf']} exceeds budget {record['budget']}")
    if record["delta_off_mask_linf"] > tol:
        problems.append(f"perturbation outside mask ({record['delta_off_mask_linf']})")
    if record.get("attacked_min", 0.0) < -tol or record.get("attacked_max", 1.0) > 1.0 + tol:
        problems.append("attacked image leaves [0, 1]")
    return problems


def attack_record(result: AttackResult, image: np.ndarray) -> dict:
    rec = result.record()
    attacked = np.asarray(image) + result.delta
    rec["attacked_min"] = float(attacked.min())
    rec["attacked_max"] = float(attacked.max())
    return rec


def write_records(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        json.dump(list(records), fh, indent=1, sort_keys=True)
