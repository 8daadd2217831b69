"""
Entity binding distillation.

Teacher patch features are pooled to the adapter's token grid, normalized
and clustered per frame into as many groups as there are slots. Each
frame's slot attention maps are matched to the clusters by minimum
patch-averaged BCE, then trained towards their matched cluster masks.
"""

import zlib
import logging
import dataclasses

import numpy as np

from scipy.optimize import linear_sum_assignment

import slotgate.numerics as nx

from slotgate.constants import (
    BCE_CLAMP,
    EBD_MAPS,
    LAYER_SELECTIONS,
    L2_NORMALIZE_EPSILON,
)
from slotgate.exceptions import ConfigError, ShapeError, NumericalError
from slotgate.parallel import map_ordered


LOGGER = logging.getLogger(__name__)

KMEANS_MAX_ITERS = 100
KMEANS_RESTARTS = 4
MATCH_TOLERANCE = 1e-12


# ————————————————————————————————————————————————————————————————— Classes


@dataclasses.dataclass(frozen=True)
class DistillConfig:
    weight: float = 0.1
    layers: str = 'all'
    attention_map: str = 'slot-axis'
    all_iterations: bool = False

    def __post_init__(self):

        if self.weight < 0:
            raise ConfigError('distill.weight', 'must not be negative.')

        if self.layers not in LAYER_SELECTIONS:
            raise ConfigError('distill.layers', 'must be one of {0}.'.format(
                ', '.join(LAYER_SELECTIONS)))

        if self.attention_map not in EBD_MAPS:
            raise ConfigError('distill.attention_map',
                              'must be one of {0}.'.format(', '.join(EBD_MAPS)))

    @property
    def enabled(self):
        return self.weight > 0

    def applies_to(self, layer, insert_layers):

        if not self.enabled or layer not in insert_layers:
            return False

        return self.layers == 'all' or layer == max(insert_layers)


@dataclasses.dataclass
class TeacherFeatures:
    ''' Per-frame patch features, (T, P, F). '''

    features: np.ndarray
    video_id: str = ''
    source: str = 'file'
    pooled: bool = False

    @property
    def num_frames(self):
        return self.features.shape[0]

    @property
    def num_patches(self):
        return self.features.shape[1]


@dataclasses.dataclass
class ClusterMap:
    ''' Per-frame cluster ids of every token, (T, N) integers in [0, K). '''

    labels: np.ndarray
    num_clusters: int

    @property
    def num_frames(self):
        return self.labels.shape[0]

    def one_hot(self):
        ''' Binary (T, K, N) map; every token belongs to one cluster. '''

        frames, tokens = self.labels.shape
        target = np.zeros((frames, self.num_clusters, tokens))

        np.put_along_axis(target, self.labels[:, None, :], 1.0, axis=1)

        return target


@dataclasses.dataclass
class MatchAssignment:
    ''' `permutations[t][k]` is the cluster matched to slot k on frame t. '''

    permutations: np.ndarray
    costs: np.ndarray


# ——————————————————————————————————————————————————————— Teacher features


def grid_side(count, what):

    side = int(round(np.sqrt(count)))

    if side * side != count:
        raise ShapeError('{0} count {1} is not a square grid.'.format(
            what, count))

    return side


def pool_and_normalize(teacher, tokens_per_frame, pool=2):
    ''' Average-pool the square patch grid by :param:`pool` (or not at all
        when it already has :param:`tokens_per_frame` patches), then
        ℓ2-normalize every patch feature. '''

    features = np.asarray(teacher.features, dtype=np.float64)

    if features.ndim != 3:
        raise ShapeError('teacher features must be (T, P, F), got {0}.'.format(
            features.shape))

    frames, patches, width = features.shape

    if patches != tokens_per_frame:
        side = grid_side(patches, 'patch')
        target = grid_side(tokens_per_frame, 'token')

        if side % pool or side // pool != target:
            raise ShapeError('a {0}×{0} patch grid does not pool by {1} to '
                             '{2}×{2} tokens.'.format(side, pool, target))

        features = features.reshape(
            frames, target, pool, target, pool, width).mean(axis=(2, 4))
        features = features.reshape(frames, target * target, width)

    norms = np.sqrt((features * features).sum(axis=-1, keepdims=True))

    return dataclasses.replace(
        teacher,
        features=features / (norms + L2_NORMALIZE_EPSILON),
        pooled=True)


# ————————————————————————————————————————————————————————————————— K-means


def squared_distances(points, centroids):

    diff = points[:, None, :] - centroids[None, :, :]

    return (diff * diff).sum(axis=-1)


def kmeans_plus_plus(points, k, rng):
    ''' D²-weighted seeding. Duplicate points are never picked twice while
        distinct ones remain. '''

    chosen = [int(rng.integers(len(points)))]

    for _ in range(1, k):
        closest = squared_distances(points, points[chosen]).min(axis=1)
        total = closest.sum()

        if total > 0:
            index = int(rng.choice(len(points), p=closest / total))

        else:
            remaining = np.setdiff1d(np.arange(len(points)), chosen)
            index = int(rng.choice(remaining))

        chosen.append(index)

    return points[chosen].copy()


def repair_empty_clusters(points, labels, centroids, k):
    ''' Give every empty cluster the point farthest from its centroid,
        taken from a cluster with more than one member. '''

    labels = labels.copy()

    for cluster in range(k):
        if (labels == cluster).any():
            continue

        counts = np.bincount(labels, minlength=k)
        spread = ((points - centroids[labels]) ** 2).sum(axis=1)
        spread[counts[labels] < 2] = -1.0

        labels[int(np.argmax(spread))] = cluster

    return labels


def lloyd(points, k, rng, max_iters=KMEANS_MAX_ITERS):

    centroids = kmeans_plus_plus(points, k, rng)
    labels = None

    for _ in range(max_iters):
        new_labels = repair_empty_clusters(
            points, np.argmin(squared_distances(points, centroids), axis=1),
            centroids, k)

        if labels is not None and np.array_equal(labels, new_labels):
            break

        labels = new_labels
        centroids = np.stack([points[labels == cluster].mean(axis=0)
                              for cluster in range(k)])

    inertia = ((points - centroids[labels]) ** 2).sum()

    return labels, inertia


def kmeans(points, k, seed, restarts=KMEANS_RESTARTS):
    ''' Seeded k-means: k-means++ initialization, Lloyd iterations until
        the assignment is stable (at most 100). The lowest-inertia run of
        :param:`restarts` wins; the first one wins ties.

        :param seed: int or :class:`numpy.random.SeedSequence`.
        :returns: cluster id of each point.
    '''

    points = np.asarray(points, dtype=np.float64)

    if points.ndim != 2:
        raise ShapeError('kmeans needs (N, F) points, got {0}.'.format(
            points.shape))

    if len(points) < k:
        raise ShapeError('kmeans needs at least {0} points, got {1}.'.format(
            k, len(points)))

    sequence = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)

    best_labels, best_inertia = None, None

    for child in sequence.spawn(restarts):
        labels, inertia = lloyd(points, k, np.random.default_rng(child))

        if best_inertia is None or inertia < best_inertia:
            best_labels, best_inertia = labels, inertia

    return best_labels


def frame_seed(seed, video_id, frame):
    ''' Seed depending only on the run seed, the video and the frame, so
        iteration order never changes cluster targets. '''

    return np.random.SeedSequence(
        [int(seed), zlib.crc32(str(video_id).encode('utf-8')), int(frame)])


def build_cluster_maps(teacher, k, seed, threads=None):
    ''' Per-frame k-means over pooled teacher features. '''

    if not teacher.pooled:
        raise ShapeError('teacher features must be pooled and normalized.')

    def cluster(frame):
        return kmeans(teacher.features[frame], k,
                      frame_seed(seed, teacher.video_id, frame))

    labels = map_ordered(cluster, range(teacher.num_frames), threads=threads)

    return ClusterMap(labels=np.stack(labels).astype(np.int64),
                      num_clusters=k)


# ———————————————————————————————————————————————————————————————— Matching


def bce_cost_matrix(attention, clusters):
    ''' Entry (k, j): mean over tokens of BCE between slot k's attention
        row and cluster j's binary row. Attention is clamped to
        [1e-7, 1 − 1e-7]. '''

    attention = np.clip(np.asarray(attention, dtype=np.float64),
                        BCE_CLAMP, 1.0 - BCE_CLAMP)
    clusters = np.asarray(clusters, dtype=np.float64)

    if attention.shape != clusters.shape or attention.ndim != 2:
        raise ShapeError('bce_cost_matrix: shapes {0} and {1}.'.format(
            attention.shape, clusters.shape))

    tokens = attention.shape[1]

    return -(np.log(attention) @ clusters.T
             + np.log(1.0 - attention) @ (1.0 - clusters).T) / tokens


def hungarian(cost):
    ''' Minimum-total-cost permutation of a square cost matrix, ties
        broken towards the lexicographically smallest permutation.

        :returns: `perm` with row k matched to column `perm[k]`.
    '''

    cost = np.asarray(cost, dtype=np.float64)

    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError('hungarian needs a square matrix, got {0}.'.format(
            cost.shape))

    if not np.isfinite(cost).all():
        raise NumericalError('hungarian: cost matrix is not finite.')

    size = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    best = cost[rows, cols].sum()
    tolerance = MATCH_TOLERANCE * max(1.0, abs(best))

    # Fix rows in order, each to the smallest column that keeps the
    # optimum reachable.
    perm = np.empty(size, dtype=np.int64)
    free_cols = list(range(size))
    fixed_cost = 0.0

    for row in range(size):
        rest_rows = list(range(row + 1, size))

        for col in free_cols:
            rest_cols = [other for other in free_cols if other != col]
            total = fixed_cost + cost[row, col]

            if rest_rows:
                sub = cost[np.ix_(rest_rows, rest_cols)]
                sub_rows, sub_cols = linear_sum_assignment(sub)
                total += sub[sub_rows, sub_cols].sum()

            if total <= best + tolerance:
                perm[row] = col
                fixed_cost += cost[row, col]
                free_cols.remove(col)
                break

    return perm


def match_slots(attention, cluster_map):
    ''' Per-frame matching of (T, K, N) attention values to clusters. '''

    attention = np.asarray(attention, dtype=np.float64)
    clusters = cluster_map.one_hot()

    if attention.shape != clusters.shape:
        raise ShapeError('attention maps {0} and cluster maps {1}.'.format(
            attention.shape, clusters.shape))

    permutations, costs = [], []

    for frame in range(attention.shape[0]):
        cost = bce_cost_matrix(attention[frame], clusters[frame])
        perm = hungarian(cost)

        permutations.append(perm)
        costs.append(cost[np.arange(len(perm)), perm].sum())

    return MatchAssignment(permutations=np.stack(permutations),
                           costs=np.array(costs))


def ebd_loss(attention, cluster_map):
    ''' Binding loss of (T, K, N) attention maps against their matched
        cluster masks, averaged over frames, slots and tokens.

        The matching is recomputed from detached values on every call;
        gradients flow through the BCE terms only.
    '''

    attention = nx.as_tensor(attention)

    if attention.ndim != 3 or attention.shape[1] != cluster_map.num_clusters:
        raise ShapeError('attention maps {0} for {1} clusters.'.format(
            attention.shape, cluster_map.num_clusters))

    assignment = match_slots(attention.data, cluster_map)

    clusters = cluster_map.one_hot()
    target = np.take_along_axis(
        clusters, assignment.permutations[:, :, None], axis=1)

    return nx.binary_cross_entropy(attention, target)


def block_ebd_loss(state, cluster_map, cfg):
    ''' Binding loss for one adapter block; maps are (T, N, K) in the state
        and transposed here. '''

    if not state.has_slots:
        raise ShapeError('binding loss needs slot attention maps.')

    maps = state.attention if cfg.attention_map == 'slot-axis' \
        else state.token_attention

    if not cfg.all_iterations:
        maps = maps[-1:]

    losses = [ebd_loss(nx.transpose(att, (0, 2, 1)), cluster_map)
              for att in maps]

    if len(losses) == 1:
        return losses[0]

    return nx.scale(nx.sum(nx.stack(losses)), 1.0 / len(losses))


# —————————————————————————————————————————————————————————— Binding quality


def partition_iou(predicted, truth):
    ''' Mean IoU of ground-truth groups with their IoU-matched predicted
        groups; unmatched ground-truth groups count 0. '''

    predicted = np.asarray(predicted)
    truth = np.asarray(truth)

    pred_ids = np.unique(predicted)
    true_ids = np.unique(truth)

    ious = np.zeros((len(true_ids), len(pred_ids)))

    for i, true_id in enumerate(true_ids):
        true_mask = truth == true_id

        for j, pred_id in enumerate(pred_ids):
            pred_mask = predicted == pred_id
            union = (true_mask | pred_mask).sum()
            ious[i, j] = (true_mask & pred_mask).sum() / union

    rows, cols = linear_sum_assignment(ious, maximize=True)

    return ious[rows, cols].sum() / len(true_ids)


def binding_iou(attention, masks):
    ''' Argmax-slot maps of (T, N, K) attention against (T, N) entity
        masks: per-frame IoU-matched mean IoU, averaged over frames. '''

    attention = np.asarray(attention)
    masks = np.asarray(masks)

    if attention.shape[:2] != masks.shape:
        raise ShapeError('attention {0} and masks {1}.'.format(
            attention.shape, masks.shape))

    labels = attention.argmax(axis=-1)

    return float(np.mean([partition_iou(labels[frame], masks[frame])
                          for frame in range(masks.shape[0])]))
