"""Triplet mining, losses and the generational training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, RunConfig, TrainConfig, preset
from .datagen import SPLITS, generate_arrays, load_images
from .model import ClusVPR, encode_images, images_to_tensor
from .numerics import DTYPE, GradCheckReport, check_parameter_gradients
from .optlad import PCAParams, pca_apply, pca_fit
from .pyramid import (
    TargetCache,
    encode_pyramid,
    positive_composition,
    pyramid_loss,
    pyramid_scores,
    query_composition,
)
from .retrieval import (
    DescriptorIndex,
    geo_distances,
    load_checkpoint,
    manifest_geo,
    ranking,
    read_manifest,
    recall_at_k,
    save_checkpoint,
)

log = logging.getLogger(__name__)

METRICS_HEADER = "generation,epoch,step,loss_t,loss_s,recall1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Triplet:
    query: str
    positive: str
    negatives: list[str]
    high_positives: list[str] = field(default_factory=list)
    # index positions inside the mining index, parallel to the ids above
    positive_pos: int = -1
    negative_pos: list[int] = field(default_factory=list)
    high_positive_pos: list[int] = field(default_factory=list)


def mine_triplets(
    index: DescriptorIndex,
    query_id: str,
    query_descriptor,
    query_geo,
    config: TrainConfig,
    rng: np.random.Generator,
    exclude: str | None = None,
) -> Triplet | None:
    """Mine one training triplet for a query against a gallery index.

    ``p*`` is the descriptor-nearest gallery item within ``pos_radius``
    (boundary included) and the high-ranked positives are the next
    ``k_pos`` in-radius items by rank. Negatives are drawn uniformly without
    replacement from the ``pool`` best-ranked items farther than
    ``neg_radius``; the pool is widened with a warning when it holds too few.
    Returns ``None`` (and logs) when no gallery item lies within the positive
    radius. ``exclude`` drops one id from consideration (a gallery image
    acting as its own query).
    """
    order, _ = ranking(index, query_descriptor)
    if exclude is not None:
        order = order[np.asarray(index.ids, dtype=object)[order] != exclude]
    dist = geo_distances(np.asarray(query_geo, dtype=np.float64).reshape(1, 2), index.geo, index.mode)[0]
    ranked_dist = dist[order]
    in_radius = order[ranked_dist <= config.pos_radius]
    if len(in_radius) == 0:
        log.info("query %s skipped: no gallery item within %g m", query_id, config.pos_radius)
        return None
    far = ranked_dist > config.neg_radius
    pool = order[: config.pool][far[: config.pool]]
    if len(pool) < config.negatives:
        warnings.warn(
            f"query {query_id}: only {len(pool)} negatives in the top {config.pool}; widening pool",
            RuntimeWarning,
            stacklevel=2,
        )
        pool = order[far]
        if len(pool) < config.negatives:
            raise ValueError(f"query {query_id}: index holds only {len(pool)} items beyond {config.neg_radius} m")
    negs = rng.choice(pool, size=config.negatives, replace=False)
    pos = int(in_radius[0])
    high = [int(i) for i in in_radius[1 : 1 + config.k_pos]]
    return Triplet(
        query_id,
        index.ids[pos],
        [index.ids[i] for i in negs],
        [index.ids[i] for i in high],
        pos,
        [int(i) for i in negs],
        high,
    )


def softmax_triplet_loss(f_q: torch.Tensor, f_p: torch.Tensor, f_n: torch.Tensor) -> torch.Tensor:
    """``sum_i -log(e^<q,p> / (e^<q,p> + e^<q,n_i>))`` written as a sum of softplus terms.

    ``f_q``, ``f_p`` are ``(B x) dim``; ``f_n`` is ``(B x) M x dim``.
    """
    pos = (f_q * f_p).sum(-1, keepdim=True)
    neg = (f_n @ f_q.unsqueeze(-1)).squeeze(-1)
    return F.softplus(neg - pos).sum(-1)


def softmax_triplet_loss_direct(f_q, f_p, f_n) -> float:
    """Literal ratio form of the softmax triplet loss, for cross-checking."""
    f_q, f_p, f_n = (np.asarray(v, dtype=np.float64) for v in (f_q, f_p, f_n))
    for name, v in (("query", f_q), ("positive", f_p)):
        if abs(np.linalg.norm(v) - 1) > 1e-6:
            raise ValueError(f"{name} descriptor is not unit length")
    if np.any(np.abs(np.linalg.norm(f_n, axis=-1) - 1) > 1e-6):
        raise ValueError("negative descriptors are not unit length")
    sp = math.exp(float(f_q @ f_p))
    return float(sum(-math.log(sp / (sp + math.exp(float(f_q @ n)))) for n in f_n))


def total_loss(triplet_part, pyramid_parts, lambda_s: float):
    """``L_t + lambda_s * sum_k L_s(q, p^k)``; an empty pyramid list contributes nothing."""
    if not len(pyramid_parts) or lambda_s == 0:
        return triplet_part
    return triplet_part + lambda_s * sum(pyramid_parts)


@dataclass
class Split:
    ids: list[str]
    images: np.ndarray  # uint8 n x H x W x 3
    geo: np.ndarray


@dataclass
class Dataset:
    gallery: Split
    train: Split
    val: Split
    mode: str = "planar"

    @classmethod
    def from_world(cls, world) -> "Dataset":
        data = generate_arrays(world)
        splits = [Split([r.id for r in rows], imgs, manifest_geo(rows)) for rows, imgs in (data[s] for s in SPLITS)]
        return cls(*splits)

    @classmethod
    def from_dir(cls, root) -> "Dataset":
        root = Path(root)
        splits = []
        mode = "planar"
        for name in SPLITS:
            rows = read_manifest(root / f"{name}.csv")
            imgs, bad = load_images(rows, root)
            if bad:
                log.warning("%s: skipped unreadable images %s", name, ", ".join(bad))
            rows = [r for r in rows if r.id not in set(bad)]
            if rows:
                mode = rows[0].mode
            splits.append(Split([r.id for r in rows], imgs, manifest_geo(rows)))
        return cls(*splits, mode=mode)


def model_sections(model: ClusVPR, pca: PCAParams | None) -> dict[str, np.ndarray]:
    meta = json.dumps(_model_config_dict(model.config), sort_keys=True).encode("utf-8")
    sections = {"meta.config": np.frombuffer(meta, dtype=np.uint8).astype(np.float64)}
    for name, tensor in model.state_dict().items():
        sections[name] = tensor.detach().cpu().numpy()
    if pca is not None:
        sections["pca.mean"] = pca.mean
        sections["pca.projection"] = pca.projection
        sections["pca.eigenvalues"] = pca.eigenvalues
    return sections


def _model_config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def save_model(model: ClusVPR, pca: PCAParams | None, path) -> None:
    save_checkpoint(model_sections(model, pca), path)


def load_model(path) -> tuple[ClusVPR, PCAParams | None]:
    sections = load_checkpoint(path)
    meta = json.loads(sections.pop("meta.config").astype(np.uint8).tobytes().decode("utf-8"))
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta.items()})
    model = ClusVPR(cfg)
    pca = None
    if "pca.mean" in sections:
        pca = PCAParams(sections.pop("pca.mean"), sections.pop("pca.projection"), sections.pop("pca.eigenvalues"))
    state = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in sections.items()}
    model.load_state_dict(state)
    return model, pca


@dataclass
class EpochEval:
    gallery: np.ndarray
    train: np.ndarray
    val: np.ndarray
    pca: PCAParams
    recall1: float


def evaluate(model: ClusVPR, data: Dataset, config: RunConfig) -> EpochEval:
    """Encode all splits, fit PCA on the training splits and measure held-out recall@1."""
    model.eval()
    g = encode_images(model, data.gallery.images)
    t = encode_images(model, data.train.images)
    v = encode_images(model, data.val.images)
    fit = np.concatenate([g, t])
    out_dim = min(config.model.out_dim, fit.shape[1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pca = pca_fit(fit, out_dim)
    index = DescriptorIndex(data.gallery.ids, pca_apply(g, pca), data.gallery.geo, data.mode)
    report = recall_at_k(index, pca_apply(v, pca), data.val.geo, ks=(1,), threshold=config.train.eval_threshold)
    return EpochEval(g, t, v, pca, report.recalls[1])


class Trainer:
    """Generational training on a :class:`Dataset`.

    Random draws come from one ``numpy`` generator seeded with
    ``train.seed``, in this order: cluster-initialisation sample, k-means
    seeding, then per epoch the query permutation followed by negative
    sampling in permutation order. Model weights are initialised from a
    torch generator with the same seed.
    """

    def __init__(self, config: RunConfig, data: Dataset, out_dir=None):
        self.config = config
        self.data = data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        tc = config.train
        self.rng = np.random.default_rng(tc.seed)
        self.model = ClusVPR(config.model, seed=tc.seed)
        sample = self.rng.choice(len(data.gallery.ids), size=min(64, len(data.gallery.ids)), replace=False)
        self.model.init_clusters(images_to_tensor(data.gallery.images[np.sort(sample)]), seed=int(self.rng.integers(2**31)))
        if tc.gallery_queries:
            g, t = data.gallery, data.train
            self.queries = Split(t.ids + g.ids, np.concatenate([t.images, g.images]), np.concatenate([t.geo, g.geo]))
        else:
            self.queries = data.train
        self.query_pos = {rid: i for i, rid in enumerate(self.queries.ids)}
        self.q_comp = query_composition()
        self.p_comp = positive_composition()
        self.metrics: list[str] = [METRICS_HEADER]
        self.history: list[dict] = []
        self.cache = TargetCache()
        self.step = 0

    # --- losses -----------------------------------------------------------
    def batch_loss(self, triplets: list[Triplet], generation: int, frozen: ClusVPR | None):
        tc = self.config.train
        g_imgs = self.data.gallery.images
        b = len(triplets)
        q_idx = [self.query_pos[t.query] for t in triplets]
        p_idx = [t.positive_pos for t in triplets]
        n_idx = [i for t in triplets for i in t.negative_pos]
        imgs = np.concatenate([self.queries.images[q_idx], g_imgs[p_idx], g_imgs[n_idx]])
        use_pyramid = generation > 0 and tc.lambda_s > 0 and frozen is not None
        hp = [(j, i, rid) for j, t in enumerate(triplets) for i, rid in zip(t.high_positive_pos, t.high_positives)]
        if use_pyramid and hp:
            imgs = np.concatenate([imgs, g_imgs[[i for _, i, _ in hp]]])
        fmaps = self.model.features(images_to_tensor(imgs))
        desc = self.model.encode_map(fmaps[: b * (2 + tc.negatives)])
        f_q, f_p = desc[:b], desc[b : 2 * b]
        f_n = desc[2 * b :].view(b, tc.negatives, -1)
        loss_t = softmax_triplet_loss(f_q, f_p, f_n)
        loss_s = torch.zeros(b, dtype=DTYPE)
        if use_pyramid and hp:
            targets = self._targets(triplets, hp, generation, frozen)
            q_reps = encode_pyramid(self.model.encode_map, fmaps[:b], self.q_comp)
            rows = torch.tensor([j for j, _, _ in hp])
            p_reps = encode_pyramid(self.model.encode_map, fmaps[b * (2 + tc.negatives) :], self.p_comp)
            current = pyramid_scores(q_reps[rows], p_reps, 1.0, check=False)
            kl = pyramid_loss(current, targets)
            loss_s = loss_s.index_add(0, rows, kl)
        total = total_loss(loss_t, [loss_s], tc.lambda_s if use_pyramid else 0.0)
        return total.mean(), loss_t.mean(), loss_s.mean()

    @torch.no_grad()
    def _targets(self, triplets, hp, generation: int, frozen: ClusVPR) -> torch.Tensor:
        tau = self.config.train.temperature(generation - 1)
        missing = [(j, i, rid) for j, i, rid in hp if (generation, triplets[j].query, rid) not in self.cache]
        if missing:
            q_imgs = self.queries.images[[self.query_pos[triplets[j].query] for j, _, _ in missing]]
            p_imgs = self.data.gallery.images[[i for _, i, _ in missing]]
            frozen.eval()
            q_maps = frozen.features(images_to_tensor(q_imgs))
            p_maps = frozen.features(images_to_tensor(p_imgs))
            q = encode_pyramid(frozen.encode_map, q_maps, self.q_comp)
            p = encode_pyramid(frozen.encode_map, p_maps, self.p_comp)
            scores = pyramid_scores(q, p, tau, check=False)
            for (j, _, rid), s in zip(missing, scores):
                self.cache.put(generation, triplets[j].query, rid, s.numpy())
        return torch.stack(
            [torch.as_tensor(self.cache.get(generation, triplets[j].query, rid)) for j, _, rid in hp]
        )

    # --- loop ---------------------------------------------------------------
    def mine_epoch(self, ev: EpochEval) -> list[Triplet]:
        tc = self.config.train
        index = DescriptorIndex(self.data.gallery.ids, ev.gallery, self.data.gallery.geo, self.data.mode)
        triplets = []
        q_desc = np.concatenate([ev.train, ev.gallery]) if tc.gallery_queries else ev.train
        n_train = len(self.data.train.ids)
        for qi in self.rng.permutation(len(self.queries.ids)):
            rid = self.queries.ids[qi]
            exclude = rid if qi >= n_train else None
            t = mine_triplets(index, rid, q_desc[qi], self.queries.geo[qi], tc, self.rng, exclude=exclude)
            if t is not None:
                triplets.append(t)
        return triplets

    def _log(self, generation: int, epoch: int, loss_t: float, loss_s: float, recall1: float) -> None:
        line = f"{generation},{epoch},{self.step},{loss_t:.6f},{loss_s:.6f},{recall1:.6f}"
        self.metrics.append(line)
        self.history.append(
            dict(generation=generation, epoch=epoch, step=self.step, loss_t=loss_t, loss_s=loss_s, recall1=recall1)
        )
        log.info(line)
        if self.out_dir is not None:
            (self.out_dir / "metrics.csv").write_text("\n".join(self.metrics) + "\n")

    def run(self) -> dict:
        tc = self.config.train
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.resolved").write_text(self.config.dumps())
        ev = evaluate(self.model, self.data, self.config)
        baseline = ev.recall1
        self._log(-1, 0, math.nan, math.nan, baseline)
        generation_recall = []
        for generation in range(tc.generations):
            frozen = None
            if generation > 0:
                frozen = copy.deepcopy(self.model).eval()
                for p in frozen.parameters():
                    p.requires_grad_(False)
            # optimizer state resets at each generation boundary
            opt = torch.optim.SGD(
                self.model.parameters(), lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay
            )
            for epoch in range(1, tc.epochs + 1):
                self.model.train()
                triplets = self.mine_epoch(ev)
                sums = np.zeros(2)
                count = 0
                for start in range(0, len(triplets), tc.batch_size):
                    batch = triplets[start : start + tc.batch_size]
                    loss, lt, ls = self.batch_loss(batch, generation, frozen)
                    if not torch.isfinite(loss):
                        raise TrainingDiverged(
                            f"non-finite loss at generation {generation} epoch {epoch} step {self.step}"
                        )
                    opt.zero_grad()
                    loss.backward()
                    if tc.grad_clip is not None:
                        torch.nn.utils.clip_grad_norm_(self.model.parameters(), tc.grad_clip)
                    opt.step()
                    self.step += 1
                    sums += [lt.item() * len(batch), ls.item() * len(batch)]
                    count += len(batch)
                ev = evaluate(self.model, self.data, self.config)
                lt_mean, ls_mean = sums / max(count, 1)
                self._log(generation, epoch, lt_mean, ls_mean, ev.recall1)
            generation_recall.append(ev.recall1)
            if self.out_dir is not None:
                save_model(self.model, ev.pca, self.out_dir / f"generation{generation}.ckpt")
                if len(self.cache):
                    self.cache.save(self.out_dir / "targets.npz")
        return {
            "baseline_recall1": baseline,
            "generation_recall1": generation_recall,
            "metrics": "\n".join(self.metrics) + "\n",
            "pca": ev.pca,
        }


def train_generations(config: RunConfig, data: Dataset | str | Path | None = None, out_dir=None) -> dict:
    """Train for ``config.train.generations`` generations; see :class:`Trainer`."""
    if data is None:
        data = Dataset.from_world(config.world)
    elif not isinstance(data, Dataset):
        data = Dataset.from_dir(data)
    trainer = Trainer(config, data, out_dir)
    result = trainer.run()
    result["model"] = trainer.model
    return result


def randomize_zero_parameters(model, scale: float = 0.1, seed: int = 0) -> None:
    """Give all-zero parameter tensors small random values (for gradient checks)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if not torch.any(p != 0):
                p.normal_(0.0, scale, generator=g)


def gradient_check_suite(
    config: RunConfig | None = None,
    seed: int = 0,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = 12,
    randomize_zero: bool = True,
) -> list[GradCheckReport]:
    """Check the gradient of the full training loss for every parameter tensor.

    Builds a tiny model and batch (one query, one top positive, negatives and
    high-ranked positives drawn from a tiny synthetic world) with distillation
    targets taken from a perturbed copy of the model, so both loss terms are
    active.
    """
    config = config or preset("tiny")
    tc = config.train
    model = ClusVPR(config.model, seed=seed)
    if randomize_zero:
        randomize_zero_parameters(model, seed=seed + 1)
    world = generate_arrays(config.world)
    imgs = np.concatenate([world[s][1] for s in SPLITS])
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(imgs), size=2 + tc.negatives + tc.k_pos, replace=False)
    x = images_to_tensor(imgs[pick])
    b_q, b_p = x[:1], x[1:2]
    b_n = x[2 : 2 + tc.negatives]
    b_h = x[2 + tc.negatives :]

    teacher = copy.deepcopy(model)
    with torch.no_grad():
        for p in teacher.parameters():
            p.add_(0.05 * torch.randn(p.shape, dtype=DTYPE, generator=torch.Generator().manual_seed(seed + 2)))
        q_t = encode_pyramid(teacher.encode_map, teacher.features(b_q), query_composition())
        p_t = encode_pyramid(teacher.encode_map, teacher.features(b_h), positive_composition())
        target = pyramid_scores(q_t.expand(len(b_h), -1, -1), p_t, tc.temperature(0), check=False)

    def loss_fn():
        f = model(torch.cat([b_q, b_p, b_n]))
        lt = softmax_triplet_loss(f[0], f[1], f[2:])
        q = encode_pyramid(model.encode_map, model.features(b_q), query_composition())
        p = encode_pyramid(model.encode_map, model.features(b_h), positive_composition())
        cur = pyramid_scores(q.expand(len(b_h), -1, -1), p, 1.0, check=False)
        parts = list(pyramid_loss(cur, target))
        return total_loss(lt, parts, tc.lambda_s)

    named = list(model.named_parameters())
    return check_parameter_gradients(
        loss_fn, named, h=h, tolerance=tolerance, max_coords=max_coords, rng=np.random.default_rng(seed + 3)
    )
