"""Task distributions and episodic N-way K-shot sampling.

Three distribution kinds:

* ``sinusoid`` — regression on y = A sin(x + phi), the classic few-shot
  regression benchmark (A in [0.1, 5], phi in [0, pi], x in [-5, 5]).
* ``gaussian_blobs`` — classification over a fixed pool of Gaussian
  class clusters; the pool's centroids are drawn once from the
  distribution seed, so a distribution is an immutable class inventory.
* ``image_folder`` — directory-per-class grayscale images, resized to
  28x28 and flattened (optional; requires Pillow).

Episode sampling is a pure function of (distribution, sizes, rng):
identical seeds give bitwise-identical episode streams.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, InsufficientData

SINUSOID_AMP_RANGE = (0.1, 5.0)
SINUSOID_PHASE_RANGE = (0.0, np.pi)
SINUSOID_X_RANGE = (-5.0, 5.0)
IMAGE_SIDE = 28


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    task_id: str
    kind: str  # "regression" | "classification"
    task_info: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.support_x.shape[1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.support_x, self.support_y, self.query_x, self.query_y):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class TaskDistribution:
    kind: str  # "sinusoid" | "gaussian_blobs" | "image_folder"
    seed: int = 0
    # gaussian_blobs parameters
    dim: int = 2
    n_classes: int = 64
    center_spread: float = 4.0
    cluster_std: float = 1.0
    centers: Optional[np.ndarray] = None
    # image_folder parameters
    root: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("sinusoid", "gaussian_blobs", "image_folder"):
            raise ValueError(f"unknown task distribution kind {self.kind!r}")
        if self.kind == "gaussian_blobs" and self.centers is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x626C6F62]))
            centers = rng.uniform(
                -self.center_spread, self.center_spread, size=(self.n_classes, self.dim)
            )
            object.__setattr__(self, "centers", centers)
        if self.kind == "gaussian_blobs" and self.centers is not None:
            object.__setattr__(self, "n_classes", int(np.asarray(self.centers).shape[0]))
            object.__setattr__(self, "dim", int(np.asarray(self.centers).shape[1]))
        if self.kind == "image_folder":
            if self.root is None:
                raise ValueError("image_folder distribution needs a root directory")
            object.__setattr__(self, "dim", IMAGE_SIDE * IMAGE_SIDE)

    @property
    def input_dim(self) -> int:
        return 1 if self.kind == "sinusoid" else self.dim

    @property
    def task_kind(self) -> str:
        return "regression" if self.kind == "sinusoid" else "classification"


def _sample_sinusoid(n_way, k_shot, q_query, rng) -> Episode:
    amp = rng.uniform(*SINUSOID_AMP_RANGE)
    phase = rng.uniform(*SINUSOID_PHASE_RANGE)
    n_s, n_q = k_shot, q_query
    xs = rng.uniform(*SINUSOID_X_RANGE, size=(n_s, 1))
    xq = rng.uniform(*SINUSOID_X_RANGE, size=(n_q, 1))
    return Episode(
        support_x=xs,
        support_y=amp * np.sin(xs[:, 0] + phase),
        query_x=xq,
        query_y=amp * np.sin(xq[:, 0] + phase),
        n_way=1,
        k_shot=k_shot,
        task_id=f"sin-a{amp:.6f}-p{phase:.6f}",
        kind="regression",
        task_info={"amplitude": amp, "phase": phase},
    )


def _sample_blobs(d: TaskDistribution, n_way, k_shot, q_query, rng) -> Episode:
    if n_way > d.n_classes:
        raise InsufficientData(f"{n_way}-way requested but only {d.n_classes} classes")
    chosen = rng.choice(d.n_classes, size=n_way, replace=False)
    perm = rng.permutation(n_way)  # fresh label permutation per episode
    sx, sy, qx, qy = [], [], [], []
    for slot, cls in zip(perm, chosen):
        pts = d.centers[cls] + d.cluster_std * rng.standard_normal(
            (k_shot + q_query, d.dim)
        )
        sx.append(pts[:k_shot])
        qx.append(pts[k_shot:])
        sy.append(np.full(k_shot, slot, dtype=np.int64))
        qy.append(np.full(q_query, slot, dtype=np.int64))
    order_s = rng.permutation(n_way * k_shot)
    order_q = rng.permutation(n_way * q_query)
    return Episode(
        support_x=np.concatenate(sx)[order_s],
        support_y=np.concatenate(sy)[order_s],
        query_x=np.concatenate(qx)[order_q],
        query_y=np.concatenate(qy)[order_q],
        n_way=n_way,
        k_shot=k_shot,
        task_id="blobs-" + "-".join(str(c) for c in chosen),
        kind="classification",
        task_info={"classes": chosen.tolist(), "labels": perm.tolist()},
    )


def _load_image_classes(root: str) -> dict[str, list[str]]:
    classes = {}
    for name in sorted(os.listdir(root)):
        cdir = os.path.join(root, name)
        if not os.path.isdir(cdir):
            continue
        files = sorted(
            os.path.join(cdir, f)
            for f in os.listdir(cdir)
            if f.lower().endswith((".png", ".pgm"))
        )
        if files:
            classes[name] = files
    return classes


def _load_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L").resize((IMAGE_SIDE, IMAGE_SIDE), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64).ravel() / 255.0


def _sample_image_folder(d: TaskDistribution, n_way, k_shot, q_query, rng) -> Episode:
    classes = _load_image_classes(d.root)
    usable = {k: v for k, v in classes.items() if len(v) >= k_shot + q_query}
    if len(usable) < n_way:
        raise InsufficientData(
            f"{n_way}-way with {k_shot}+{q_query} images needs {n_way} classes, "
            f"found {len(usable)} usable under {d.root}"
        )
    names = sorted(usable)
    chosen = rng.choice(len(names), size=n_way, replace=False)
    perm = rng.permutation(n_way)
    sx, sy, qx, qy = [], [], [], []
    for slot, ci in zip(perm, chosen):
        files = usable[names[ci]]
        picks = rng.choice(len(files), size=k_shot + q_query, replace=False)
        imgs = np.stack([_load_image(files[i]) for i in picks])
        sx.append(imgs[:k_shot])
        qx.append(imgs[k_shot:])
        sy.append(np.full(k_shot, slot, dtype=np.int64))
        qy.append(np.full(q_query, slot, dtype=np.int64))
    return Episode(
        support_x=np.concatenate(sx),
        support_y=np.concatenate(sy),
        query_x=np.concatenate(qx),
        query_y=np.concatenate(qy),
        n_way=n_way,
        k_shot=k_shot,
        task_id="img-" + "-".join(names[i] for i in chosen),
        kind="classification",
    )


def sample_episode(
    d: TaskDistribution, n_way: int, k_shot: int, q_query: int, rng: np.random.Generator
) -> Episode:
    """Draw one episode; pure in (d, sizes, rng state)."""
    if d.kind == "sinusoid":
        return _sample_sinusoid(n_way, k_shot, q_query, rng)
    if d.kind == "gaussian_blobs":
        return _sample_blobs(d, n_way, k_shot, q_query, rng)
    return _sample_image_folder(d, n_way, k_shot, q_query, rng)


@dataclass(frozen=True)
class ScenarioSpec:
    train: TaskDistribution
    test: TaskDistribution

    def __post_init__(self):
        if self.train.input_dim != self.test.input_dim:
            raise DimensionMismatch(
                f"train dim {self.train.input_dim} != test dim {self.test.input_dim}"
            )
        if self.train.task_kind != self.test.task_kind:
            raise DimensionMismatch("train and test distributions differ in task kind")


def scenario_pair(train: TaskDistribution, test: TaskDistribution) -> ScenarioSpec:
    """Pair a training distribution with a disjoint meta-test distribution."""
    return ScenarioSpec(train=train, test=test)
