"""Bus-affinity computation and spectral partitioning into regions.

The affinity between two buses sums the absolute Hessian entries over the
buses' variable index sets and adds the admittance modulus, so strongly
computationally coupled buses land in the same region.  Clustering follows
the symmetric-normalized spectral embedding with row normalization and a
seeded k-means (written here rather than taken from sklearn so that fixed
seeds give byte-identical partitions regardless of BLAS threading).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .formulation import KktSystem, VariableLayout
from .model import PowerSystem

KMEANS_RESTARTS = 50
KMEANS_MAX_SWEEPS = 300
RESEED_ROUNDS = 10


class PartitionError(ValueError):
    """Unusable clustering request or result."""


@dataclass(frozen=True)
class AffinityMatrix:
    """Dense symmetric nonnegative bus-to-bus coupling, zero diagonal."""

    a: np.ndarray
    bus_ids: tuple[int, ...]
    operating_point: KktSystem | None = None
    y_abs: np.ndarray | None = None  # |Y|, for attaching zero-affinity buses


@dataclass(frozen=True)
class Partition:
    """Assignment of every bus to one of K regions (labels canonicalized so
    region indices follow the smallest contained bus id)."""

    region_of: dict[int, int]
    K: int
    tie_lines: tuple[int, ...] = ()
    boundary_buses: frozenset[int] = frozenset()


def compute_affinity(kkt: KktSystem, Y: np.ndarray,
                     layout: VariableLayout) -> AffinityMatrix:
    """Affinity a[m,n] = sum_{i in S_m, j in S_n} |H_ij| + |Y_mn|, diag 0."""
    B = len(layout.bus_ids)
    n = layout.size
    Z = sp.csr_matrix(
        (np.ones(n), (np.arange(n), layout.bus_of)), shape=(n, B)
    )
    absH = abs(kkt.hessian)
    grouped = np.asarray((Z.T @ absH @ Z).todense())
    y_abs = np.abs(np.asarray(Y))
    A = grouped + y_abs
    np.fill_diagonal(A, 0.0)
    A = 0.5 * (A + A.T)  # kill summation-order asymmetry exactly
    return AffinityMatrix(a=A, bus_ids=layout.bus_ids, operating_point=kkt,
                          y_abs=y_abs)


def _kmeans_once(X: np.ndarray, K: int, rng: np.random.Generator):
    """One k-means++ run; returns (labels, objective) or None on an empty
    cluster."""
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, K):
        total = d2.sum()
        probs = d2 / total if total > 0.0 else np.full(n, 1.0 / n)
        centers[c] = X[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    labels = np.full(n, -1)
    for _ in range(KMEANS_MAX_SWEEPS):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist.argmin(axis=1)
        for c in range(K):
            members = new_labels == c
            if not members.any():
                return None
            centers[c] = X[members].mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    obj = float(dist[np.arange(n), labels].sum())
    return labels, obj


def _cluster(X: np.ndarray, K: int, seed: int) -> np.ndarray:
    """Best of KMEANS_RESTARTS seeded runs; re-seed whole rounds (up to
    RESEED_ROUNDS) if every restart produced an empty cluster."""
    for round_off in range(RESEED_ROUNDS):
        rng = np.random.default_rng(seed + round_off)
        best = None
        best_obj = np.inf
        for _ in range(KMEANS_RESTARTS):
            got = _kmeans_once(X, K, rng)
            if got is None:
                continue
            labels, obj = got
            if obj < best_obj:
                best, best_obj = labels, obj
        if best is not None:
            return best
    raise PartitionError(
        f"k-means produced an empty cluster in every restart across "
        f"{RESEED_ROUNDS} re-seeded rounds (K={K})"
    )


def _canonicalize(labels: np.ndarray, bus_ids: tuple[int, ...], K: int) -> dict[int, int]:
    first_bus = {}
    for lab, bus in zip(labels, bus_ids):
        first_bus.setdefault(int(lab), bus)
        first_bus[int(lab)] = min(first_bus[int(lab)], bus)
    order = sorted(first_bus, key=lambda lab: first_bus[lab])
    remap = {old: new for new, old in enumerate(order)}
    return {bus: remap[int(lab)] for bus, lab in zip(bus_ids, labels)}


def spectral_partition(A: AffinityMatrix, K: int, seed: int,
                       system: PowerSystem | None = None) -> Partition:
    """Normalized spectral clustering of the affinity into K regions.

    Buses with a zero affinity row cannot be embedded; they are attached to
    the region of their strongest admittance neighbor (with a warning).
    Passing ``system`` also derives tie lines and boundary buses.
    """
    a = A.a
    B = a.shape[0]
    if not 1 <= K <= B:
        raise PartitionError(f"K={K} outside [1, {B}]")
    if K == 1:
        region_of = {bus: 0 for bus in A.bus_ids}
        part = Partition(region_of=region_of, K=1)
        return _attach_boundary(part, system)

    d = a.sum(axis=1)
    isolated = np.where(d == 0.0)[0]
    active = np.where(d > 0.0)[0]
    if K > len(active):
        raise PartitionError(
            f"K={K} exceeds the {len(active)} buses with nonzero affinity"
        )
    dm = 1.0 / np.sqrt(d[active])
    lsym = dm[:, None] * a[np.ix_(active, active)] * dm[None, :]
    eigvals, eigvecs = np.linalg.eigh(lsym)
    X = eigvecs[:, -K:]  # K largest eigenvalues
    norms = np.linalg.norm(X, axis=1)
    norms[norms == 0.0] = 1.0
    X = X / norms[:, None]

    labels_active = _cluster(X, K, seed)
    labels = np.full(B, -1)
    labels[active] = labels_active
    if len(isolated):
        warnings.warn(
            f"buses {[A.bus_ids[i] for i in isolated]} have zero affinity; "
            "assigning by strongest admittance neighbor", stacklevel=2
        )
        for i in isolated:
            if A.y_abs is not None and A.y_abs[i, active].max() > 0.0:
                labels[i] = labels[active[int(np.argmax(A.y_abs[i, active]))]]
            else:
                labels[i] = 0
    region_of = _canonicalize(labels, A.bus_ids, K)
    part = Partition(region_of=region_of, K=K)
    return _attach_boundary(part, system)


def derive_boundary(partition: Partition, system: PowerSystem):
    """Tie lines (branch indices crossing regions) and their endpoint buses."""
    ties = tuple(
        n for n, br in enumerate(system.branches)
        if partition.region_of[br.from_bus] != partition.region_of[br.to_bus]
    )
    boundary = frozenset(
        end for n in ties
        for end in (system.branches[n].from_bus, system.branches[n].to_bus)
    )
    return ties, boundary


def _attach_boundary(partition: Partition, system: PowerSystem | None) -> Partition:
    if system is None:
        return partition
    ties, boundary = derive_boundary(partition, system)
    return replace(partition, tie_lines=ties, boundary_buses=boundary)


def make_partition(region_of: dict[int, int], K: int | None = None,
                   system: PowerSystem | None = None) -> Partition:
    """Build (and canonicalize) a Partition from an explicit bus->region map."""
    if not region_of:
        raise PartitionError("empty region map")
    labels = np.array([region_of[b] for b in sorted(region_of)])
    uniq = sorted(set(int(v) for v in labels))
    k = K if K is not None else len(uniq)
    if uniq != list(range(k)):
        raise PartitionError(
            f"region indices must be exactly 0..{k - 1}, got {uniq}"
        )
    if system is not None:
        missing = [b.id for b in system.buses if b.id not in region_of]
        if missing:
            raise PartitionError(f"buses {missing} unassigned")
    bus_ids = tuple(sorted(region_of))
    region = _canonicalize(labels, bus_ids, k)
    return _attach_boundary(Partition(region_of=region, K=k), system)


def partition_to_json(partition: Partition) -> str:
    doc = {
        "K": partition.K,
        "region_of": {str(b): int(r) for b, r in sorted(partition.region_of.items())},
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def partition_from_json(text: str, system: PowerSystem | None = None) -> Partition:
    doc = json.loads(text)
    region_of = {int(b): int(r) for b, r in doc["region_of"].items()}
    return make_partition(region_of, K=int(doc["K"]), system=system)
