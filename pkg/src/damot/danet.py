"""Domain-adaptation networks and losses: the local/global/track
discriminators, a small conv-backbone + query-decoder tracker exposing the
three discriminator hook points, and the adversarial loss terms.

Discriminator probabilities are clamped to [1e-7, 1-1e-7] before any log.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamW, BatchNorm2d, Conv2d, Dropout, Linear, Module, Tensor,
    avgpool2d_global, concat, conv2d, grl, stack,
)
from .assoc import hungarian
from .mot_io import RunConfig

PROB_EPS = 1e-7
LEAKY_SLOPE = 0.2
QUERY_DIM = 128


class InputError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Discriminators
# ---------------------------------------------------------------------------

LOGITNORM_MOMENTUM = 0.9


class LogitNorm(Module):
    """Normalize classifier logits with running batch statistics:
    (z - mean) / (1 + std), where mean/std are exponential moving averages
    treated as constants in the graph.

    An unconstrained discriminator on an easy domain pair saturates within a
    few hundred steps; its output probabilities pin to 0/1 and the gradient
    it sends back through the reversal layer vanishes, which freezes feature
    alignment. Normalizing keeps the logits O(1) no matter how decisively
    the discriminator wins, so the reversed gradient into the feature
    extractor never dies. The +1 in the denominator leaves small, undecided
    logits untouched.

    The statistics are running averages rather than current-batch moments on
    purpose: normalizing by in-graph batch statistics couples the samples
    through the shared mean, and under gradient reversal that coupling points
    the per-sample gradients away from the other domain (raising one sample's
    target score pushes every other sample towards source), which separates
    the domains instead of aligning them. With the statistics held constant
    the per-sample gradient keeps its plain cross-entropy direction, only
    rescaled. Buffers update from the pre-normalization logits after the
    forward pass, in training mode only, so each call is an exact affine map
    of its input.
    """

    def __init__(self, momentum: float = LOGITNORM_MOMENTUM):
        super().__init__()
        self.momentum = momentum
        self.mean = 0.0
        self.std = 0.0

    def __call__(self, z: Tensor, axis) -> Tensor:
        out = (z - self.mean) * (1.0 / (1.0 + self.std))
        if self.training:
            m = self.momentum
            batch_mean = float(z.data.mean())
            batch_std = float(z.data.std())
            self.mean = m * self.mean + (1 - m) * batch_mean
            self.std = m * self.std + (1 - m) * batch_std
        return out

    def state(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    def load_state(self, state: dict):
        self.mean = float(state["mean"])
        self.std = float(state["std"])


class LocalDiscriminator(Module):
    """Pixel-wise domain classifier: three 1x1 convs, stride 1.

    Output spatial shape equals input spatial shape; values in (0,1).
    """

    def __init__(self, in_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, 256, 1, 1, rng)
        self.conv2 = Conv2d(256, 128, 1, 1, rng)
        self.conv3 = Conv2d(128, 1, 1, 1, rng)
        self.norm = LogitNorm()

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(x).leaky_relu(LEAKY_SLOPE)
        h = self.conv2(h).leaky_relu(LEAKY_SLOPE)
        return self.norm(self.conv3(h), axis=(0, 2, 3)).sigmoid()


class GlobalDiscriminator(Module):
    """Image-level domain classifier: strided convs + BN + dropout, global
    average pooling, Linear(128) and a final scalar projection + sigmoid."""

    def __init__(self, in_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, 512, 3, 2, rng)
        self.bn1 = BatchNorm2d(512)
        self.drop1 = Dropout(0.5)
        self.conv2 = Conv2d(512, 128, 3, 2, rng)
        self.bn2 = BatchNorm2d(128)
        self.drop2 = Dropout(0.5)
        self.conv3 = Conv2d(128, 128, 1, 2, rng)
        self.bn3 = BatchNorm2d(128)
        self.drop3 = Dropout(0.5)
        self.fc = Linear(128, 128, rng)
        self.head = Linear(128, 1, rng)
        self.norm = LogitNorm()

    def __call__(self, x: Tensor) -> Tensor:
        h = self.drop1(self.bn1(self.conv1(x)).leaky_relu(LEAKY_SLOPE))
        h = self.drop2(self.bn2(self.conv2(h)).leaky_relu(LEAKY_SLOPE))
        h = self.drop3(self.bn3(self.conv3(h)).leaky_relu(LEAKY_SLOPE))
        h = avgpool2d_global(h)
        h = self.fc(h).leaky_relu(LEAKY_SLOPE)
        return self.norm(self.head(h), axis=(0, 1)).sigmoid().reshape(-1)


class TrackDiscriminator(Module):
    """Per-query domain classifier: Linear(128) -> Dropout -> Linear(2) ->
    softmax. The scalar score is the 'target' class probability."""

    def __init__(self, rng: np.random.Generator, in_features: int = QUERY_DIM):
        super().__init__()
        self.fc1 = Linear(in_features, 128, rng)
        self.drop = Dropout(0.5)
        self.fc2 = Linear(128, 2, rng)
        self.norm = LogitNorm()

    def class_probs(self, q: Tensor) -> Tensor:
        # L2-normalize each embedding first: with normalized logits the game
        # is scale-invariant, so the reversed gradient could otherwise win by
        # inflating embedding magnitude instead of mixing the domains.
        q = q / (q.square().sum(axis=-1, keepdims=True).sqrt() + 1e-8)
        h = self.drop(self.fc1(q).leaky_relu(LEAKY_SLOPE))
        return self.norm(self.fc2(h), axis=0).softmax(axis=-1)

    def __call__(self, q: Tensor) -> Tensor:
        return self.class_probs(q)[:, 1]


# ---------------------------------------------------------------------------
# Toy tracker: conv backbone + query decoder
# ---------------------------------------------------------------------------

ATTN_TEMP = 8.0
NO_OBJECT_WEIGHT = 0.2


def _sinusoid(coords: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal encoding of normalized 2-D coordinates, shape (L, d)."""
    half = d // 2
    freqs = 2.0 ** np.arange(half // 2) * math.pi
    pe = np.zeros((coords.shape[0], d))
    for c in range(2):
        block = coords[:, c:c + 1] * freqs[None, :]
        pe[:, c * half:c * half + half // 2] = np.sin(block)
        pe[:, c * half + half // 2:(c + 1) * half] = np.cos(block)
    return pe


@dataclass(frozen=True)
class ToyTrackerConfig:
    in_channels: int = 1
    channels: tuple = (8, 16, 32, 32)
    strides: tuple = (2, 1, 2, 2)
    n_object_queries: int = 10
    query_dim: int = QUERY_DIM
    frame_size: int = 64

    @property
    def local_channels(self) -> int:
        return self.channels[1]

    @property
    def global_channels(self) -> int:
        return self.channels[3]


@dataclass
class FrameOutput:
    """Per-frame tracker outputs for one batch sample."""
    embeddings: Tensor     # (n_tr + n_ob, query_dim)
    boxes: Tensor          # (n_tr + n_ob, 4) normalized (cx, cy, w, h) in [0,1]
    exist_logits: Tensor   # (n_tr + n_ob,)
    n_track_queries: int
    track_ids: tuple       # identity per track query (parallel to the first n_tr rows)


@dataclass
class BatchForward:
    f_local: Tensor        # F' feature map (n, c1, H', W')
    f_global: Tensor       # F'' feature map (n, c2, H'', W'')
    per_sample: list       # list of FrameOutput
    aux: Tensor = None     # dense detection map (n, 5, H'', W'')


class ToyTracker(Module):
    """Small joint-detection-and-tracking stand-in.

    Backbone: four 3x3 conv blocks with configurable strides; the early map
    feeds the local discriminator, the late map the global one. Decoder:
    single-layer dot-product attention over the flattened late feature grid
    with learned object queries plus carried-over track queries; outputs feed
    the track discriminator and the box/existence heads.
    """

    def __init__(self, cfg: ToyTrackerConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.in_channels, *cfg.channels]
        self.blocks = [
            Conv2d(chans[i], chans[i + 1], 3, cfg.strides[i], rng, padding=1)
            for i in range(4)
        ]
        d = cfg.query_dim
        self.key_proj = Linear(cfg.global_channels, d, rng)
        self.val_proj = Linear(cfg.global_channels, d, rng)
        # learned query content plus fixed anchor positions spread over the
        # frame; anchors give each object query its own region to watch
        n_ob = cfg.n_object_queries
        anchors = np.stack([(np.arange(n_ob) + 0.5) / n_ob,
                            ((np.arange(n_ob) * 0.618034 + 0.5) % 1.0)], axis=1)
        self.object_queries = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(d), (n_ob, d)) + _sinusoid(anchors, d),
            requires_grad=True)
        self.mlp1 = Linear(d, d, rng)
        self.mlp2 = Linear(d, d, rng)
        self.box_head = Linear(d, 4, rng)
        self.exist_head = Linear(d, 1, rng)
        self.aux_head = Conv2d(cfg.global_channels, 5, 1, 1, rng)
        self._pos_cache = {}

    def backbone(self, x: Tensor):
        h = x
        f_local = None
        for i, block in enumerate(self.blocks):
            h = block(h).relu()
            if i == 1:
                f_local = h
        return f_local, h

    def _grid_positions(self, h: int, w: int):
        """Fixed sinusoidal encoding of each grid cell center plus the raw
        normalized (x, y) coordinates, cached per grid shape.

        Without this the attention values are translation invariant and the
        box head has no way to recover coordinates.
        """
        key = (h, w)
        if key not in self._pos_cache:
            cell_xy = np.stack([(np.tile(np.arange(w), h) + 0.5) / w,
                                (np.repeat(np.arange(h), w) + 0.5) / h], axis=1)
            pe = _sinusoid(cell_xy, self.cfg.query_dim)
            self._pos_cache[key] = (Tensor(pe), Tensor(cell_xy))
        return self._pos_cache[key]

    def _decode(self, grid: Tensor, queries: Tensor, pos: Tensor,
                coords: Tensor):
        """Two rounds of dot-product attention over one sample's feature
        grid; the second round refines the first round's estimates.

        Returns (embeddings, soft-argmax center estimates): the attention
        weights of the final round pool the normalized cell centers, which
        anchors each query's box center prediction.
        """
        keys = self.key_proj(grid) + pos
        vals = self.val_proj(grid) + pos
        keys_t = keys.transpose(1, 0)
        scale = ATTN_TEMP / math.sqrt(self.cfg.query_dim)
        h = queries
        for _ in range(2):
            attn = (h.matmul(keys_t) * scale).softmax(axis=-1)
            h = h + attn.matmul(vals)
        centers = attn.matmul(coords)
        return h + self.mlp2(self.mlp1(h).relu()), centers

    def forward(self, x: Tensor, track_queries=None) -> BatchForward:
        """Run one batch of frames.

        `track_queries`, when given, is one (embeddings Tensor, track ids)
        pair per batch sample; embeddings are prepended to the object
        queries so the first rows of every output carry those identities.
        """
        if x.data.ndim != 4:
            raise InputError(f"expected (N, C, H, W) frames, got {x.shape}")
        n = x.data.shape[0]
        if track_queries is not None and len(track_queries) != n:
            raise InputError("one track-query set per batch sample required")
        f_local, f_global = self.backbone(x)
        c2 = f_global.data.shape[1]
        pos, coords = self._grid_positions(f_global.data.shape[2], f_global.data.shape[3])
        per_sample = []
        for i in range(n):
            grid = f_global[i].reshape(c2, -1).transpose(1, 0)
            if track_queries is not None and track_queries[i] is not None:
                tq, tids = track_queries[i]
                queries = concat([tq, self.object_queries], axis=0)
                n_tr = tq.data.shape[0]
            else:
                queries, tids, n_tr = self.object_queries, (), 0
            emb, centers = self._decode(grid, queries, pos, coords)
            raw = self.box_head(emb)
            cxy = centers + (raw[:, :2].sigmoid() - 0.5) * 0.25
            boxes = concat([cxy.clip(0.0, 1.0), raw[:, 2:].sigmoid()], axis=1)
            logits = self.exist_head(emb).reshape(-1)
            per_sample.append(FrameOutput(
                embeddings=emb, boxes=boxes, exist_logits=logits,
                n_track_queries=n_tr, track_ids=tuple(tids)))
        return BatchForward(f_local=f_local, f_global=f_global,
                            per_sample=per_sample, aux=self.aux_head(f_global))


def forward_hooks(tracker: ToyTracker, frame_pair, track_queries_t1=None,
                  track_queries_t2=None):
    """Run both time steps and expose the discriminator inputs.

    Returns a dict with per-time-step F', F'' maps and per-sample decoder
    outputs, matching the sum-over-t structure of the adversarial losses.
    """
    x1, x2 = frame_pair
    if x1.data.shape != x2.data.shape:
        raise InputError(
            f"frame pair shapes differ: {x1.shape} vs {x2.shape}")
    out1 = tracker.forward(x1, track_queries_t1)
    out2 = tracker.forward(x2, track_queries_t2)
    return {"t1": out1, "t2": out2}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _check_two_steps(maps, name):
    if maps is None or len(maps) != 2:
        raise InputError(f"{name} requires one entry per time step t=1,2")


def local_loss(d_src, d_tgt) -> Tensor:
    """Least-squares pixel loss: D^2 on source, (1-D)^2 on target,
    averaged over pixels, (1/4) sum over both time steps."""
    _check_two_steps(d_src, "d_src")
    _check_two_steps(d_tgt, "d_tgt")
    total = None
    for t in range(2):
        term = d_src[t].square().mean() + (1.0 - d_tgt[t]).square().mean()
        total = term if total is None else total + term
    return total * 0.25


def _focal_pair(p_src: Tensor, p_tgt: Tensor, gamma: float) -> Tensor:
    d_s = p_src.clip(PROB_EPS, 1.0 - PROB_EPS)
    d_t = p_tgt.clip(PROB_EPS, 1.0 - PROB_EPS)
    src = ((1.0 - d_s).pow(gamma) * d_s.log()).mean() * -1.0
    tgt = (d_t.pow(gamma) * (1.0 - d_t).log()).mean() * -1.0
    return src + tgt


def global_loss(p_src, p_tgt, gamma: float) -> Tensor:
    """Focal-weighted cross-entropy on per-image probabilities: source scores
    are pushed towards 1, target towards 0; the (1-p)^gamma / p^gamma factors
    make confidently-wrong examples dominate for gamma > 0."""
    if gamma <= 0:
        raise InputError(f"gamma must be > 0, got {gamma}")
    _check_two_steps(p_src, "p_src")
    _check_two_steps(p_tgt, "p_tgt")
    total = None
    for t in range(2):
        term = _focal_pair(p_src[t], p_tgt[t], gamma)
        total = term if total is None else total + term
    return total * 0.25


def track_loss(q_src, q_tgt, gamma: float) -> Tensor:
    """Same focal structure as the global loss, averaged over all query
    scores per time step (sign fixed so the loss is non-negative)."""
    if gamma <= 0:
        raise InputError(f"gamma must be > 0, got {gamma}")
    _check_two_steps(q_src, "q_src")
    _check_two_steps(q_tgt, "q_tgt")
    for t in range(2):
        if q_src[t].size == 0 or q_tgt[t].size == 0:
            raise InputError("track_loss requires at least one query per domain")
    total = None
    for t in range(2):
        term = _focal_pair(q_src[t], q_tgt[t], gamma)
        total = term if total is None else total + term
    return total * 0.25


@dataclass(frozen=True)
class LossBreakdown:
    l_mot: float
    l_local: float
    l_global: float
    l_track: float
    gamma: float
    lambdas: tuple
    total: float

    def recompute_total(self) -> float:
        l1, l2, l3 = self.lambdas
        return self.l_mot + l1 * self.l_local + l2 * self.l_global + l3 * self.l_track


def total_loss(l_mot: Tensor, l_local: Tensor, l_global: Tensor,
               l_track: Tensor, cfg: RunConfig):
    """Combine the supervised loss with the weighted discriminator losses.

    Returns (total Tensor for backward, LossBreakdown record).
    """
    parts = {"l_mot": l_mot, "l_local": l_local, "l_global": l_global,
             "l_track": l_track}
    for name, part in parts.items():
        if not np.isfinite(part.data).all():
            raise NumericError(f"loss component {name} is not finite")
    lambdas = (cfg.lambda_local, cfg.lambda_global, cfg.lambda_track)
    total = l_mot + l_local * lambdas[0] + l_global * lambdas[1] + l_track * lambdas[2]
    breakdown = LossBreakdown(
        l_mot=float(l_mot.data), l_local=float(l_local.data),
        l_global=float(l_global.data), l_track=float(l_track.data),
        gamma=cfg.gamma, lambdas=lambdas, total=float(total.data))
    return total, breakdown


def _bce_logit(logit: Tensor, label: float) -> Tensor:
    """Stable binary cross-entropy from a logit tensor."""
    absz = logit.relu() + (-logit).relu()
    softplus = (Tensor(1.0) + (-absz).exp()).log()
    return logit.relu() - logit * label + softplus


def dense_detection_loss(aux_map: Tensor, gt_boxes: np.ndarray) -> Tensor:
    """Per-cell detection loss on one sample's dense map (5, H, W).

    Channel 0 is cell objectness (an agent center falls in the cell);
    channels 1:5 regress the center offset within the cell and the box size,
    supervised only at positive cells. This dense signal trains the backbone
    to localize far faster than the set loss alone.
    """
    _, h, w = aux_map.shape
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    obj_target = np.zeros((h, w))
    reg_target = np.zeros((4, h, w))
    pos_mask = np.zeros((4, h, w))
    for cx, cy, bw, bh in gt_boxes:
        col = min(int(cx * w), w - 1)
        row = min(int(cy * h), h - 1)
        obj_target[row, col] = 1.0
        reg_target[:, row, col] = (cx * w - col, cy * h - row, bw, bh)
        pos_mask[:, row, col] = 1.0

    logits = aux_map[0]
    # balanced BCE: the sparse positive cells get full weight
    weights = np.where(obj_target > 0, 1.0, 0.2)
    absz = logits.relu() + (-logits).relu()
    softplus = (Tensor(1.0) + (-absz).exp()).log()
    bce = (logits.relu() - logits * Tensor(obj_target) + softplus) * Tensor(weights)
    reg = aux_map[1:5]
    reg_diff = (reg - Tensor(reg_target)) * Tensor(pos_mask)
    reg_l1 = (reg_diff.relu() + (-reg_diff).relu()).sum() / max(len(gt_boxes), 1)
    return bce.mean() + reg_l1


def match_to_gt(output: FrameOutput, gt_boxes: np.ndarray,
                pre_matched: dict | None = None) -> dict:
    """Assign queries to GT rows: track queries keep their `pre_matched`
    identity (no re-matching); remaining object queries are Hungarian-matched
    on L1 box distance."""
    nq = output.exist_logits.size
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    m = gt_boxes.shape[0]
    pre_matched = pre_matched or {}

    taken_gt = {g for g in pre_matched.values() if g is not None}
    free_q = [q for q in range(nq) if q not in pre_matched]
    free_g = [g for g in range(m) if g not in taken_gt]
    match = dict(pre_matched)
    if free_q and free_g:
        pred = output.boxes.data
        cost = np.zeros((len(free_q), len(free_g)))
        for a, q in enumerate(free_q):
            for b, g in enumerate(free_g):
                cost[a, b] = np.abs(pred[q] - gt_boxes[g]).sum()
        for a, b in hungarian(cost).pairs:
            match[free_q[a]] = free_g[b]
    return match


def toy_mot_loss(output: FrameOutput, gt_boxes: np.ndarray,
                 pre_matched: dict | None = None,
                 match: dict | None = None) -> Tensor:
    """Simplified supervised set loss: matched queries pay L1 box error plus
    existence cross-entropy, unmatched queries pay no-object cross-entropy.

    `gt_boxes` is (m, 4) normalized (cx, cy, w, h). `pre_matched` maps a
    track-query row to its GT row (or None when the identity left the frame);
    those rows skip Hungarian re-matching.
    """
    nq = output.exist_logits.size
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    pre = pre_matched or {}
    if match is None:
        match = match_to_gt(output, gt_boxes, pre_matched)

    terms = []
    for q in range(nq):
        g = match.get(q)
        logit = output.exist_logits[q]
        if g is None:
            # down-weight the abundant no-object class for plain object
            # queries so existence does not collapse to all-negative, but
            # keep full weight on track queries whose identity ended:
            # that is the termination signal
            weight = 1.0 if q in pre else NO_OBJECT_WEIGHT
            terms.append(_bce_logit(logit, 0.0) * weight)
        else:
            diff = output.boxes[q] - Tensor(gt_boxes[g])
            box_err = (diff.relu() + (-diff).relu()).sum()
            terms.append(_bce_logit(logit, 1.0) + box_err * 5.0)
    return stack(terms).mean() if terms else Tensor(0.0)
