"""Proposals of the marked edge walk and their transition ratios.

A composite step draws

1. ``e+`` uniformly from the non-tree edges and ``e-`` uniformly from the
   unmarked edges of the fundamental cycle ``C`` of ``e+`` (``e- = e+`` is
   allowed and leaves the tree unchanged), giving ``T'``;
2. a marked edge ``m`` uniformly, one of its endpoints ``u`` uniformly and a
   ``T'``-neighbour ``v`` of ``u`` uniformly; the mark moves to ``m' = {u, v}``.

``transition_ratio`` returns ``P(x | x') / P(x' | x)`` summed over every
selection tuple that links the two states. It agrees with the single-path
expression ``pathwise_transition_ratio`` except in two situations where
several tuples produce the same move:

* the tree is unchanged but the mark moves: any non-tree edge paired with
  ``e- = e+`` gives the same move, so the cycle factor becomes
  ``Σ_e 1/|C_e \\ M'| / Σ_e 1/|C_e \\ M|`` over all non-tree ``e``;
* the tree changes but the mark stays: with two or more marks, any mark
  with either endpoint and the neighbour back along it is a no-op, so the
  mark factor becomes ``Σ_k (1/deg_T a_k + 1/deg_T b_k) / Σ_k (same in T')``.

Both ratios give a valid Metropolis-Hastings chain for the same target.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from ._accel import quiet_wraparound
from .rng import Stream
from .state import MarkedTreeState


class RejectReason(enum.Enum):
    COLLISION = "collision"
    REVERSE_IMPOSSIBLE = "reverse_impossible"
    UNBALANCED = "unbalanced"
    MH_REJECT = "mh_reject"


STATUS_REASON = {
    K.COLLISION: RejectReason.COLLISION,
    K.REVERSE_IMPOSSIBLE: RejectReason.REVERSE_IMPOSSIBLE,
    K.UNBALANCED: RejectReason.UNBALANCED,
    K.MH_REJECT: RejectReason.MH_REJECT,
}


@dataclass(frozen=True)
class Proposal:
    """Everything drawn for one move, with the quantities its ratio needs.

    ``kind`` is ``"composite"``, ``"cycle"`` or ``"marked"``. Fields of a step
    that was not taken are ``None``. ``balanced`` reports whether the
    proposed forest satisfies the balance bounds.
    """

    kind: str
    e_plus: int | None
    e_minus: int | None
    cycle: tuple[int, ...]
    m_old: int | None
    marked_index: int | None
    endpoint_u: int | None
    other_w: int | None
    neighbor_v: int | None
    m_new: int | None
    deg_t_u: int | None
    deg_t_v: int | None
    deg_tp_u: int | None
    deg_tp_v: int | None
    cycle_minus_m: int
    cycle_minus_mprime: int
    sum_m: float
    sum_mprime: float
    dsum_t: float
    dsum_tprime: float
    n_marked: int
    balanced: bool
    tree_edges: frozenset
    marked: frozenset

    @property
    def lazy_tree(self) -> bool:
        return self.e_plus is None or self.e_plus == self.e_minus

    @property
    def mark_moves(self) -> bool:
        return self.m_old is not None and self.m_new != self.m_old

    @property
    def new_tree_edges(self) -> frozenset:
        if self.lazy_tree:
            return self.tree_edges
        return (self.tree_edges | {self.e_plus}) - {self.e_minus}

    @property
    def new_marked(self) -> frozenset:
        if not self.mark_moves:
            return self.marked
        return (self.marked - {self.m_old}) | {self.m_new}


class _Context:
    """Per-state scratch space and a balance-only parameter block."""

    def __init__(self, state: MarkedTreeState):
        g = state.graph
        lo, hi = state.balance.bounds(g, state.d)
        empty_i = np.zeros(0, dtype=np.int64)
        empty_f = np.zeros(0, dtype=np.float64)
        self.params = K.Params(
            d=state.d, lo=float(lo), hi=float(hi), gamma=1.0, special=1, need_tau=False,
            exact=True, single=False, p_cycle=0.5,
            obs_kind=empty_i, obs_part=empty_i, obs_lam=empty_f, n_eobs=0,
            term_obs=empty_i, term_beta=empty_f, term_center=empty_f, cache_limit=1,
        )
        self.scratch = K.new_scratch(g.vertex_count, g.edge_count, state.d, 1)


def _context(state: MarkedTreeState) -> _Context:
    ctx = getattr(state, "_walk_ctx", None)
    if ctx is None:
        ctx = _Context(state)
        state._walk_ctx = ctx
    return ctx


def fundamental_cycle(state: MarkedTreeState, e_plus: int) -> list[int]:
    """Edge ids of the unique cycle in ``T + e_plus``: the tree path, then ``e_plus``."""
    if state.arrays.in_tree[e_plus]:
        raise ValueError(f"edge {e_plus} is already in the tree")
    ctx = _context(state)
    g = state.kgraph
    k = K.tree_path(state.arrays, ctx.scratch, g.eu[e_plus], g.ev[e_plus])
    return [int(e) for e in ctx.scratch.cyc[:k]] + [int(e_plus)]


def _opt(x) -> int | None:
    x = int(x)
    return None if x < 0 else x


def read_proposal(S: K.Scratch, tree_edges: frozenset, marked: frozenset, d: int, balanced: bool) -> Proposal:
    """Decode the kernel's proposal record; ``tree_edges``/``marked`` describe the state it was drawn from."""
    pi, pf = S.pi, S.pf
    kind = {0: "composite", 1: "cycle", 2: "marked"}[int(pi[K.PI_KIND])]
    has_cycle = kind != "marked"
    has_mark = kind != "cycle"
    clen = int(pi[K.PI_CLEN]) if has_cycle else 0
    return Proposal(
        kind=kind,
        e_plus=_opt(pi[K.PI_EPLUS]) if has_cycle else None,
        e_minus=_opt(pi[K.PI_EMINUS]) if has_cycle else None,
        cycle=tuple(int(e) for e in S.cyc[:clen]),
        m_old=_opt(pi[K.PI_MOLD]) if has_mark else None,
        marked_index=_opt(pi[K.PI_MIDX]) if has_mark else None,
        endpoint_u=_opt(pi[K.PI_U]) if has_mark else None,
        other_w=_opt(pi[K.PI_W]) if has_mark else None,
        neighbor_v=_opt(pi[K.PI_V]) if has_mark else None,
        m_new=_opt(pi[K.PI_MNEW]) if has_mark else None,
        deg_t_u=int(pi[K.PI_DTU]) if has_mark else None,
        deg_t_v=int(pi[K.PI_DTV]) if has_mark else None,
        deg_tp_u=int(pi[K.PI_DTPU]) if has_mark else None,
        deg_tp_v=int(pi[K.PI_DTPV]) if has_mark else None,
        cycle_minus_m=int(pi[K.PI_CM]),
        cycle_minus_mprime=int(pi[K.PI_CMP]),
        sum_m=float(pf[K.PF_SUM_M]),
        sum_mprime=float(pf[K.PF_SUM_MP]),
        dsum_t=float(pf[K.PF_DSUM_T]),
        dsum_tprime=float(pf[K.PF_DSUM_TP]),
        n_marked=d - 1,
        balanced=balanced,
        tree_edges=tree_edges,
        marked=marked,
    )


def _draw(state: MarkedTreeState, rng: Stream, single: bool, p_cycle: float):
    if state.d < 2:
        raise ValueError("the walk needs at least one marked edge")
    if len(state.arrays.nontree) == 0:
        raise ValueError("the graph is a tree; the cycle step is undefined")
    ctx = _context(state)
    P = ctx.params._replace(single=single, p_cycle=float(p_cycle))
    S = ctx.scratch
    G, W = state.kgraph, state.arrays
    with quiet_wraparound():
        status = K.propose(G, W, P, S, rng.state)
        if status == K.COLLISION:
            return RejectReason.COLLISION
        if not single:
            K.prepare_ratio(G, W, P, S, True)
        balanced = K.evaluate_partition(G, W, P, S) == K.ACCEPTED
    return read_proposal(S, state.tree_edges, state.marked, state.d, balanced)


def propose(state: MarkedTreeState, rng: Stream) -> Proposal | RejectReason:
    """Draw one composite proposal, or ``RejectReason.COLLISION``.

    Unbalanced proposals are returned with ``balanced=False``; the chain
    rejects them.
    """
    return _draw(state, rng, False, 0.5)


def propose_single_step(state: MarkedTreeState, rng: Stream, p_cycle: float) -> Proposal | RejectReason:
    """With probability ``p_cycle`` a cycle step only, otherwise a marked step only."""
    if not (0.0 <= p_cycle <= 1.0):
        raise ValueError("p_cycle must lie in [0, 1]")
    return _draw(state, rng, True, p_cycle)


def _ratio(p: Proposal, exact: bool) -> float:
    if p.kind != "composite":
        return 1.0
    return float(K.ratio_formula(
        exact, p.lazy_tree, not p.mark_moves, p.m_new == p.e_plus,
        float(p.cycle_minus_m), float(p.cycle_minus_mprime),
        float(p.deg_t_u), float(p.deg_t_v), float(p.deg_tp_u), float(p.deg_tp_v),
        p.sum_m, p.sum_mprime, p.dsum_t, p.dsum_tprime, p.n_marked,
    ))


def transition_ratio(p: Proposal) -> float:
    """``P(x | x') / P(x' | x)`` summed over all selection tuples linking x and x'."""
    return _ratio(p, True)


def pathwise_transition_ratio(p: Proposal) -> float:
    """The same ratio along the drawn (e+, e-, m) path only."""
    return _ratio(p, False)


def marked_edge_factor(deg_t_u: int, deg_tp_u: int) -> float:
    """Mark-step factor when the mark moves: ``deg_T'(u) / deg_T(u)``."""
    return deg_tp_u / deg_t_u


def apply(state: MarkedTreeState, p: Proposal) -> MarkedTreeState:
    """A new state with the move applied; ``state`` is left untouched."""
    if p.tree_edges != state.tree_edges or p.marked != state.marked:
        raise ValueError("proposal was drawn from a different state")
    if p.mark_moves and p.m_new in state.marked:
        raise ValueError("marked-edge collision")
    new_tree = p.new_tree_edges
    new_marked = p.new_marked
    if not new_marked <= new_tree:
        raise ValueError("proposal would mark a non-tree edge")
    tilt_seed = next((k[1] for k, v in state.graph._kernel_cache.items() if v is state.kgraph), None)
    return MarkedTreeState.from_edges(state.graph, new_tree, new_marked, state.balance, tilt_seed=tilt_seed)
