"""Array kernels for the marked edge walk.

All per-step work happens here on flat arrays grouped in namedtuples:

``KGraph``   static graph data (CSR adjacency, balance weights, vote tallies,
             tilt weights, Zobrist keys used to fingerprint parts).
``WState``   the mutable lifted state: tree/marked edge flags, a rooted parent
             array for the tree, per-vertex part labels and per-part tallies.
``Params``   balance bounds, energy encoding and walk mode.
``Scratch``  per-chain work buffers plus the proposal record ``pi``/``pf``.

A proposal is evaluated without touching ``WState``; the tree, marks and
labels are only written by ``commit`` once the move is accepted, so a
rejection costs nothing to undo.
"""

from __future__ import annotations

import math
from collections import namedtuple

import numpy as np

from ._accel import inline_kernel, kernel
from .graph import log_det_reduced
from .rng import next_double, next_open_closed, randbelow

KGraph = namedtuple(
    "KGraph",
    "n m eu ev adj_ptr adj_nbr adj_eid weight dem rep tilt zob1 zob2",
)
WState = namedtuple(
    "WState",
    "in_tree marked marked_list nontree nt_pos parent parent_edge deg label "
    "p_weight p_dem p_rep p_tilt p_size p_min p_h1 p_h2 p_logt cross ints floats",
)
Params = namedtuple(
    "Params",
    "d lo hi gamma special need_tau exact single p_cycle "
    "obs_kind obs_part obs_lam n_eobs term_obs term_beta term_center cache_limit",
)
Scratch = namedtuple(
    "Scratch",
    "vstamp estamp ustamp nstamp stamp cyc cyc_child cyc_side ulist newlab queue "
    "comp_start labs n_weight n_dem n_rep n_tilt n_size n_min n_h1 n_h2 n_logt "
    "cross_new loc pi pf obs_vals",
)

# step outcomes; also indices into the per-chain counters array
ACCEPTED = 0
COLLISION = 1
REVERSE_IMPOSSIBLE = 2
UNBALANCED = 3
MH_REJECT = 4
CLAMP = 5
N_COUNTERS = 6

# observable kinds
OBS_CUT = 0
OBS_DEM_SHARE = 1
OBS_MEAN_MEDIAN = 2
OBS_EXP = 3
OBS_ZERO = 4
OBS_LOG_TAU = 5

# proposal record layout (ints)
PI_KIND = 0  # 0 composite, 1 cycle step only, 2 marked step only
PI_EPLUS = 1
PI_EMINUS = 2
PI_LAZY = 3  # tree unchanged (e- == e+ or no cycle step)
PI_MOLD = 4
PI_MIDX = 5
PI_U = 6
PI_W = 7
PI_V = 8
PI_MNEW = 9
PI_CLEN = 10
PI_CM = 11
PI_CMP = 12
PI_DTU = 13
PI_DTV = 14
PI_DTPU = 15
PI_DTPV = 16
PI_NL = 17
PI_NU = 18
PI_SAME_PART = 19
PI_MCHILD = 20
PI_MSIDE = 21
PI_CUT_NEW = 22
PI_STATUS = 23
PI_NCOMP = 24
PI_NPATH = 25
PI_CSTAMP = 26
PI_SIZE = 32

# proposal record layout (floats)
PF_RATIO = 0
PF_SUM_M = 1
PF_SUM_MP = 2
PF_DSUM_T = 3
PF_DSUM_TP = 4
PF_LOG_TARGET = 5
PF_J_NEW = 6
PF_LOGTAU_NEW = 7
PF_LOGTQ_NEW = 8
PF_LOG_U = 9
PF_LOG_ACCEPT = 10
PF_SIZE = 16

# WState.floats layout
WF_LOGTQ = 0
WF_J = 1
WF_LOGTAU = 2

MAX_LABS = 8
SQRT2 = math.sqrt(2.0)
CLAMP_Q = 1e-15


def new_scratch(n: int, m: int, d: int, n_obs: int) -> Scratch:
    return Scratch(
        vstamp=np.zeros(n, np.int64),
        estamp=np.zeros(m, np.int64),
        ustamp=np.zeros(n, np.int64),
        nstamp=np.zeros(n, np.int64),
        stamp=np.zeros(1, np.int64),
        cyc=np.zeros(n + 1, np.int64),
        cyc_child=np.zeros(n + 1, np.int64),
        cyc_side=np.zeros(n + 1, np.int64),
        ulist=np.zeros(n, np.int64),
        newlab=np.zeros(n, np.int64),
        queue=np.zeros(n, np.int64),
        comp_start=np.zeros(MAX_LABS + 1, np.int64),
        labs=np.zeros(MAX_LABS, np.int64),
        n_weight=np.zeros(d, np.float64),
        n_dem=np.zeros(d, np.float64),
        n_rep=np.zeros(d, np.float64),
        n_tilt=np.zeros(d, np.float64),
        n_size=np.zeros(d, np.int64),
        n_min=np.zeros(d, np.int64),
        n_h1=np.zeros(d, np.int64),
        n_h2=np.zeros(d, np.int64),
        n_logt=np.zeros(d, np.float64),
        cross_new=np.zeros((d, d), np.int64),
        loc=np.full(n, -1, np.int64),
        pi=np.zeros(PI_SIZE, np.int64),
        pf=np.zeros(PF_SIZE, np.float64),
        obs_vals=np.zeros(max(n_obs, 1), np.float64),
    )


# ---------------------------------------------------------------------------
# tree queries


@inline_kernel
def tree_path(W, S, a, b):
    """Store the tree path a..b in ``S.cyc``; returns its edge count.

    Edges climbed from ``b`` get side 1, those climbed from ``a`` side 0;
    ``cyc_child`` holds the lower endpoint of each edge.
    """
    s_cyc = S.cyc
    s_cyc_child = S.cyc_child
    s_cyc_side = S.cyc_side
    s_stamp = S.stamp
    s_vstamp = S.vstamp
    w_parent = W.parent
    w_parent_edge = W.parent_edge
    st = s_stamp[0] + 1
    s_stamp[0] = st
    x = a
    while x >= 0:
        s_vstamp[x] = st
        x = w_parent[x]
    k = 0
    y = b
    while s_vstamp[y] != st:
        s_cyc[k] = w_parent_edge[y]
        s_cyc_child[k] = y
        s_cyc_side[k] = 1
        k += 1
        y = w_parent[y]
    lca = y
    x = a
    while x != lca:
        s_cyc[k] = w_parent_edge[x]
        s_cyc_child[k] = x
        s_cyc_side[k] = 0
        k += 1
        x = w_parent[x]
    return k


@inline_kernel
def _path_counts(parent, parent_edge, marked, vstamp, stamp, a, b, mo, mn):
    # (length, marked edges on path, mo on path, mn on path) without storing the path
    st = stamp[0] + 1
    stamp[0] = st
    x = a
    while x >= 0:
        vstamp[x] = st
        x = parent[x]
    length = 0
    cnt = 0
    has_mo = 0
    has_mn = 0
    y = b
    while vstamp[y] != st:
        e = parent_edge[y]
        length += 1
        cnt += marked[e]
        if e == mo:
            has_mo = 1
        if e == mn:
            has_mn = 1
        y = parent[y]
    lca = y
    x = a
    while x != lca:
        e = parent_edge[x]
        length += 1
        cnt += marked[e]
        if e == mo:
            has_mo = 1
        if e == mn:
            has_mn = 1
        x = parent[x]
    return length, cnt, has_mo, has_mn


@inline_kernel
def in_new_tree(in_tree, pi, e):
    if pi[PI_LAZY] == 1:
        return in_tree[e] == 1
    if e == pi[PI_EPLUS]:
        return True
    if e == pi[PI_EMINUS]:
        return False
    return in_tree[e] == 1


@inline_kernel
def in_new_marked(marked, pi, e):
    mo = pi[PI_MOLD]
    if mo < 0:
        return marked[e] == 1
    if e == pi[PI_MNEW]:
        return True
    if e == mo:
        return False
    return marked[e] == 1


@inline_kernel
def new_degree(eu, ev, deg, pi, x):
    dg = deg[x]
    if pi[PI_LAZY] == 0:
        ep = pi[PI_EPLUS]
        em = pi[PI_EMINUS]
        if x == eu[ep] or x == ev[ep]:
            dg += 1
        if x == eu[em] or x == ev[em]:
            dg -= 1
    return dg


# ---------------------------------------------------------------------------
# proposal


@inline_kernel
def _reset_proposal(S):
    s_pf = S.pf
    s_pi = S.pi
    for i in range(PI_SIZE):
        s_pi[i] = -1
    for i in range(PF_SIZE):
        s_pf[i] = 0.0
    s_pi[PI_LAZY] = 1
    s_pi[PI_CLEN] = 0
    s_pi[PI_CM] = 0
    s_pi[PI_CMP] = 0
    s_pi[PI_SAME_PART] = 0
    s_pi[PI_NL] = 0
    s_pi[PI_NU] = 0
    s_pf[PF_RATIO] = 1.0


@inline_kernel
def propose_cycle_step(G, W, S, rng):
    g_eu = G.eu
    g_ev = G.ev
    s_cyc = S.cyc
    s_cyc_child = S.cyc_child
    s_cyc_side = S.cyc_side
    s_estamp = S.estamp
    s_pi = S.pi
    s_stamp = S.stamp
    w_marked = W.marked
    w_nontree = W.nontree
    pi = s_pi
    nnt = w_nontree.shape[0]
    ep = w_nontree[randbelow(rng, nnt)]
    npath = tree_path(W, S, g_eu[ep], g_ev[ep])
    s_cyc[npath] = ep
    s_cyc_child[npath] = -1
    s_cyc_side[npath] = 2
    clen = npath + 1
    st = s_stamp[0] + 1
    s_stamp[0] = st
    cm = 0
    for i in range(clen):
        e = s_cyc[i]
        s_estamp[e] = st
        if w_marked[e] == 0:
            cm += 1
    r = randbelow(rng, cm)
    idx = -1
    for i in range(clen):
        if w_marked[s_cyc[i]] == 0:
            if r == 0:
                idx = i
                break
            r -= 1
    em = s_cyc[idx]
    pi[PI_EPLUS] = ep
    pi[PI_EMINUS] = em
    pi[PI_LAZY] = 1 if em == ep else 0
    pi[PI_CLEN] = clen
    pi[PI_CM] = cm
    pi[PI_CMP] = cm
    pi[PI_NPATH] = npath
    pi[PI_CSTAMP] = st
    if em != ep:
        pi[PI_MCHILD] = s_cyc_child[idx]
        pi[PI_MSIDE] = s_cyc_side[idx]


@inline_kernel
def propose_marked_step(G, W, P, S, rng):
    """Move one marked edge to a T'-neighbouring edge; returns a status code."""
    g_adj_eid = G.adj_eid
    g_adj_nbr = G.adj_nbr
    g_adj_ptr = G.adj_ptr
    g_eu = G.eu
    g_ev = G.ev
    pp_d = P.d
    s_estamp = S.estamp
    s_pi = S.pi
    w_deg = W.deg
    w_in_tree = W.in_tree
    w_marked = W.marked
    w_marked_list = W.marked_list
    pi = s_pi
    k = randbelow(rng, pp_d - 1)
    mo = w_marked_list[k]
    if randbelow(rng, 2) == 0:
        u = g_eu[mo]
        w = g_ev[mo]
    else:
        u = g_ev[mo]
        w = g_eu[mo]
    dpu = new_degree(g_eu, g_ev, w_deg, pi, u)
    j = randbelow(rng, dpu)
    v = -1
    mn = -1
    for idx in range(g_adj_ptr[u], g_adj_ptr[u + 1]):
        e = g_adj_eid[idx]
        if in_new_tree(w_in_tree, pi, e):
            if j == 0:
                v = g_adj_nbr[idx]
                mn = e
                break
            j -= 1
    pi[PI_MOLD] = mo
    pi[PI_MIDX] = k
    pi[PI_U] = u
    pi[PI_W] = w
    pi[PI_V] = v
    pi[PI_MNEW] = mn
    pi[PI_DTU] = w_deg[u]
    pi[PI_DTV] = w_deg[v]
    pi[PI_DTPU] = dpu
    pi[PI_DTPV] = new_degree(g_eu, g_ev, w_deg, pi, v)
    if pi[PI_CLEN] > 0:
        st = pi[PI_CSTAMP]
        on_c = pi[PI_CLEN] - pi[PI_CM]
        if mn != mo:
            if s_estamp[mo] == st:
                on_c -= 1
            if s_estamp[mn] == st:
                on_c += 1
        pi[PI_CMP] = pi[PI_CLEN] - on_c
    if mn != mo and w_marked[mn] == 1:
        return COLLISION
    if pi[PI_LAZY] == 0 and mn == pi[PI_EPLUS]:
        return REVERSE_IMPOSSIBLE
    return ACCEPTED


@kernel
def ratio_formula(exact, lazy, same, mn_is_ep, cm, cmp, dtu, dtv, dtpu, dtpv, sum_m, sum_mp, dsum_t, dsum_tp, n_marked):
    """P(x|x') / P(x'|x) for one proposal.

    With ``exact`` the ratio sums over every selection tuple linking the two
    states; otherwise it is the single-path ratio (e+, e-, m) with the
    endpoint choice summed when the mark stays put.
    """
    if mn_is_ep and not lazy:
        return 0.0
    if lazy and same:
        return 1.0
    if lazy and exact:
        tf = sum_mp / sum_m
    else:
        tf = cm / cmp
    if not same:
        mf = dtpu / dtu
    elif exact and n_marked >= 2:
        mf = dsum_t / dsum_tp
    else:
        mf = (dtpu / dtu) * ((dtu + dtv) / (dtpu + dtpv)) * (dtpv / dtv)
    return tf * mf


@kernel
def prepare_ratio(G, W, P, S, force_sums):
    g_eu = G.eu
    g_ev = G.ev
    pp_d = P.d
    pp_exact = P.exact
    s_pf = S.pf
    s_pi = S.pi
    s_stamp = S.stamp
    s_vstamp = S.vstamp
    w_deg = W.deg
    w_marked = W.marked
    w_marked_list = W.marked_list
    w_nontree = W.nontree
    w_parent = W.parent
    w_parent_edge = W.parent_edge
    pi = s_pi
    pf = s_pf
    lazy = pi[PI_LAZY] == 1
    same = pi[PI_MNEW] == pi[PI_MOLD]
    mo = pi[PI_MOLD]
    mn = pi[PI_MNEW]
    if lazy and not same and (pp_exact or force_sums):
        sm = 0.0
        smp = 0.0
        for i in range(w_nontree.shape[0]):
            e = w_nontree[i]
            length, cnt, has_mo, has_mn = _path_counts(w_parent, w_parent_edge, w_marked, s_vstamp, s_stamp, g_eu[e], g_ev[e], mo, mn)
            sm += 1.0 / (length + 1 - cnt)
            smp += 1.0 / (length + 1 - (cnt - has_mo + has_mn))
        pf[PF_SUM_M] = sm
        pf[PF_SUM_MP] = smp
    if (not lazy) and same and (pp_exact or force_sums):
        dt = 0.0
        dtp = 0.0
        for i in range(w_marked_list.shape[0]):
            e = w_marked_list[i]
            p = g_eu[e]
            q = g_ev[e]
            dt += 1.0 / w_deg[p] + 1.0 / w_deg[q]
            dtp += 1.0 / new_degree(g_eu, g_ev, w_deg, pi, p) + 1.0 / new_degree(g_eu, g_ev, w_deg, pi, q)
        pf[PF_DSUM_T] = dt
        pf[PF_DSUM_TP] = dtp
    pf[PF_RATIO] = ratio_formula(
        pp_exact, lazy, same, mn == pi[PI_EPLUS], float(pi[PI_CM]), float(pi[PI_CMP]),
        float(pi[PI_DTU]), float(pi[PI_DTV]), float(pi[PI_DTPU]), float(pi[PI_DTPV]),
        pf[PF_SUM_M], pf[PF_SUM_MP], pf[PF_DSUM_T], pf[PF_DSUM_TP], pp_d - 1,
    )


# ---------------------------------------------------------------------------
# partition evaluation


@inline_kernel
def _add_label(label, labs, x, nl):
    lab = label[x]
    for i in range(nl):
        if labs[i] == lab:
            return nl
    labs[nl] = lab
    return nl + 1


@kernel
def evaluate_partition(G, W, P, S):
    """Relabel the parts touched by the proposal and check balance.

    Only parts containing an endpoint of e+, e-, m or m' can change; their
    union is re-split along T' minus M'. Fills the ``n_*`` tallies,
    ``cross_new`` and the cut count. Returns ACCEPTED or UNBALANCED.
    """
    g_adj_eid = G.adj_eid
    g_adj_nbr = G.adj_nbr
    g_adj_ptr = G.adj_ptr
    g_dem = G.dem
    g_eu = G.eu
    g_ev = G.ev
    g_rep = G.rep
    g_tilt = G.tilt
    g_weight = G.weight
    g_zob1 = G.zob1
    g_zob2 = G.zob2
    pp_d = P.d
    pp_hi = P.hi
    pp_lo = P.lo
    s_comp_start = S.comp_start
    s_cross_new = S.cross_new
    s_labs = S.labs
    s_n_dem = S.n_dem
    s_n_h1 = S.n_h1
    s_n_h2 = S.n_h2
    s_n_logt = S.n_logt
    s_n_min = S.n_min
    s_n_rep = S.n_rep
    s_n_size = S.n_size
    s_n_tilt = S.n_tilt
    s_n_weight = S.n_weight
    s_newlab = S.newlab
    s_nstamp = S.nstamp
    s_pi = S.pi
    s_queue = S.queue
    s_stamp = S.stamp
    s_ulist = S.ulist
    s_ustamp = S.ustamp
    w_cross = W.cross
    w_in_tree = W.in_tree
    w_ints = W.ints
    w_label = W.label
    w_marked = W.marked
    w_p_dem = W.p_dem
    w_p_h1 = W.p_h1
    w_p_h2 = W.p_h2
    w_p_logt = W.p_logt
    w_p_min = W.p_min
    w_p_rep = W.p_rep
    w_p_size = W.p_size
    w_p_tilt = W.p_tilt
    w_p_weight = W.p_weight
    pi = s_pi
    d = pp_d
    tree_moves = pi[PI_LAZY] == 0
    marked_moves = pi[PI_MOLD] >= 0 and pi[PI_MNEW] != pi[PI_MOLD]
    if tree_moves and pi[PI_CLEN] - pi[PI_CM] == 0 and not marked_moves:
        # cycle carries no marked edge: the swap stays inside one part
        tree_moves = False
    for lab in range(d):
        s_n_weight[lab] = w_p_weight[lab]
        s_n_dem[lab] = w_p_dem[lab]
        s_n_rep[lab] = w_p_rep[lab]
        s_n_tilt[lab] = w_p_tilt[lab]
        s_n_size[lab] = w_p_size[lab]
        s_n_min[lab] = w_p_min[lab]
        s_n_h1[lab] = w_p_h1[lab]
        s_n_h2[lab] = w_p_h2[lab]
        s_n_logt[lab] = w_p_logt[lab]
    if not tree_moves and not marked_moves:
        pi[PI_SAME_PART] = 1
        pi[PI_NL] = 0
        pi[PI_NU] = 0
        pi[PI_CUT_NEW] = w_ints[0]
        return ACCEPTED
    pi[PI_SAME_PART] = 0

    nl = 0
    if tree_moves:
        ep = pi[PI_EPLUS]
        em = pi[PI_EMINUS]
        nl = _add_label(w_label, s_labs, g_eu[ep], nl)
        nl = _add_label(w_label, s_labs, g_ev[ep], nl)
        nl = _add_label(w_label, s_labs, g_eu[em], nl)
        nl = _add_label(w_label, s_labs, g_ev[em], nl)
    if marked_moves:
        nl = _add_label(w_label, s_labs, pi[PI_U], nl)
        nl = _add_label(w_label, s_labs, pi[PI_W], nl)
        nl = _add_label(w_label, s_labs, pi[PI_V], nl)

    # gather every vertex of the touched parts (old forest T \ M)
    st = s_stamp[0] + 1
    s_stamp[0] = st
    nu = 0
    for i in range(nl):
        lab = s_labs[i]
        seed = -1
        for c in (pi[PI_U], pi[PI_W], pi[PI_V]):
            if c >= 0 and w_label[c] == lab:
                seed = c
        if tree_moves:
            for e in (pi[PI_EPLUS], pi[PI_EMINUS]):
                for c in (g_eu[e], g_ev[e]):
                    if w_label[c] == lab:
                        seed = c
        if s_ustamp[seed] == st:
            continue
        s_ustamp[seed] = st
        head = nu
        s_ulist[nu] = seed
        nu += 1
        while head < nu:
            x = s_ulist[head]
            head += 1
            for idx in range(g_adj_ptr[x], g_adj_ptr[x + 1]):
                e = g_adj_eid[idx]
                if w_in_tree[e] == 1 and w_marked[e] == 0:
                    y = g_adj_nbr[idx]
                    if s_ustamp[y] != st:
                        s_ustamp[y] = st
                        s_ulist[nu] = y
                        nu += 1

    # re-split along T' \ M'
    st2 = s_stamp[0] + 1
    s_stamp[0] = st2
    ncomp = 0
    qn = 0
    for i in range(nu):
        x0 = s_ulist[i]
        if s_nstamp[x0] == st2:
            continue
        if ncomp >= nl:
            raise RuntimeError("proposal split the touched parts into too many components")
        lab = s_labs[ncomp]
        s_comp_start[ncomp] = qn
        ncomp += 1
        s_n_weight[lab] = 0.0
        s_n_dem[lab] = 0.0
        s_n_rep[lab] = 0.0
        s_n_tilt[lab] = 0.0
        s_n_size[lab] = 0
        s_n_min[lab] = x0
        s_n_h1[lab] = 0
        s_n_h2[lab] = 0
        s_nstamp[x0] = st2
        head = qn
        s_queue[qn] = x0
        qn += 1
        while head < qn:
            x = s_queue[head]
            head += 1
            s_newlab[x] = lab
            s_n_weight[lab] += g_weight[x]
            s_n_dem[lab] += g_dem[x]
            s_n_rep[lab] += g_rep[x]
            s_n_tilt[lab] += g_tilt[x]
            s_n_size[lab] += 1
            if x < s_n_min[lab]:
                s_n_min[lab] = x
            s_n_h1[lab] ^= g_zob1[x]
            s_n_h2[lab] ^= g_zob2[x]
            for idx in range(g_adj_ptr[x], g_adj_ptr[x + 1]):
                e = g_adj_eid[idx]
                if in_new_tree(w_in_tree, pi, e) and not in_new_marked(w_marked, pi, e):
                    y = g_adj_nbr[idx]
                    if s_nstamp[y] != st2:
                        if s_ustamp[y] != st:
                            raise RuntimeError("re-split escaped the touched parts")
                        s_nstamp[y] = st2
                        s_queue[qn] = y
                        qn += 1
    s_comp_start[ncomp] = qn
    if ncomp != nl:
        raise RuntimeError("proposal changed the number of parts")
    pi[PI_NL] = nl
    pi[PI_NU] = nu
    pi[PI_NCOMP] = ncomp

    for c in range(nl):
        wgt = s_n_weight[s_labs[c]]
        if wgt < pp_lo or wgt > pp_hi:
            return UNBALANCED

    # cut edges and part-to-part multiplicities
    for i in range(d):
        for j in range(d):
            s_cross_new[i, j] = w_cross[i, j]
    cut = w_ints[0]
    for i in range(nu):
        x = s_ulist[i]
        lo_x = w_label[x]
        ln_x = s_newlab[x]
        for idx in range(g_adj_ptr[x], g_adj_ptr[x + 1]):
            y = g_adj_nbr[idx]
            inside = s_ustamp[y] == st
            if inside and y < x:
                continue
            lo_y = w_label[y]
            ln_y = s_newlab[y] if inside else lo_y
            if lo_x != lo_y:
                s_cross_new[lo_x, lo_y] -= 1
                s_cross_new[lo_y, lo_x] -= 1
                cut -= 1
            if ln_x != ln_y:
                s_cross_new[ln_x, ln_y] += 1
                s_cross_new[ln_y, ln_x] += 1
                cut += 1
    pi[PI_CUT_NEW] = cut
    return ACCEPTED


# ---------------------------------------------------------------------------
# tree counts and energy


@kernel
def part_log_trees(G, S, cache, start, stop, h1, h2, limit):
    g_adj_nbr = G.adj_nbr
    g_adj_ptr = G.adj_ptr
    s_loc = S.loc
    s_queue = S.queue
    key = (h1, h2)
    if key in cache:
        return cache[key]
    k = stop - start
    if k == 1:
        val = 0.0
    else:
        for i in range(k):
            s_loc[s_queue[start + i]] = i
        lap = np.zeros((k, k), dtype=np.float64)
        for i in range(k):
            x = s_queue[start + i]
            for idx in range(g_adj_ptr[x], g_adj_ptr[x + 1]):
                j = s_loc[g_adj_nbr[idx]]
                if j >= 0:
                    lap[i, i] += 1.0
                    lap[i, j] -= 1.0
        for i in range(k):
            s_loc[s_queue[start + i]] = -1
        val = log_det_reduced(lap)
    if len(cache) >= limit:
        cache.clear()
    cache[key] = val
    return val


@kernel
def quotient_log_trees(cross, d):
    if d == 1:
        return 0.0
    if d == 2:
        return np.log(float(cross[0, 1]))
    lap = np.zeros((d, d), dtype=np.float64)
    for i in range(d):
        for j in range(d):
            if i != j:
                lap[i, j] = -float(cross[i, j])
                lap[i, i] += float(cross[i, j])
    return log_det_reduced(lap)


@kernel
def observable_values(P, d, weight, dem, rep, tilt, size, pmin, cut, logtau, out, count, counters):
    """Evaluate the first ``count`` observables of ``P`` into ``out``.

    Part indices are canonical: part k is the part with the k-th smallest
    minimum vertex id.
    """
    pp_obs_kind = P.obs_kind
    pp_obs_lam = P.obs_lam
    pp_obs_part = P.obs_part
    order = np.argsort(pmin)
    for i in range(count):
        kind = pp_obs_kind[i]
        if kind == OBS_CUT:
            out[i] = float(cut)
        elif kind == OBS_DEM_SHARE:
            lab = order[pp_obs_part[i]]
            tot = dem[lab] + rep[lab]
            if tot <= 0.0:
                raise ValueError("part has zero total votes")
            out[i] = dem[lab] / tot
        elif kind == OBS_MEAN_MEDIAN:
            shares = np.empty(d, dtype=np.float64)
            for lab in range(d):
                tot = dem[lab] + rep[lab]
                if tot <= 0.0:
                    raise ValueError("part has zero total votes")
                shares[lab] = dem[lab] / tot
            shares.sort()
            if d % 2 == 1:
                med = shares[d // 2]
            else:
                med = 0.5 * (shares[d // 2 - 1] + shares[d // 2])
            out[i] = shares.sum() / d - med
        elif kind == OBS_EXP:
            lab = order[pp_obs_part[i]]
            sz = float(size[lab])
            z = (tilt[lab] - 0.5 * sz) / math.sqrt(sz / 12.0)
            q = 0.5 * math.erfc(z / SQRT2)
            if q < CLAMP_Q:
                q = CLAMP_Q
                counters[CLAMP] += 1
            out[i] = -math.log(q) / pp_obs_lam[i]
        elif kind == OBS_ZERO:
            out[i] = 0.0
        else:
            out[i] = logtau


@inline_kernel
def energy_from_obs(P, obs):
    pp_term_beta = P.term_beta
    pp_term_center = P.term_center
    pp_term_obs = P.term_obs
    j = 0.0
    for t in range(pp_term_obs.shape[0]):
        diff = obs[pp_term_obs[t]] - pp_term_center[t]
        j -= pp_term_beta[t] * diff * diff
    return j


@kernel
def evaluate_target(G, W, P, S, cache, counters):
    """Fill the new state's J and ln tau and the log target ratio."""
    pp_cache_limit = P.cache_limit
    pp_d = P.d
    pp_gamma = P.gamma
    pp_n_eobs = P.n_eobs
    pp_need_tau = P.need_tau
    pp_special = P.special
    s_comp_start = S.comp_start
    s_cross_new = S.cross_new
    s_labs = S.labs
    s_n_dem = S.n_dem
    s_n_h1 = S.n_h1
    s_n_h2 = S.n_h2
    s_n_logt = S.n_logt
    s_n_min = S.n_min
    s_n_rep = S.n_rep
    s_n_size = S.n_size
    s_n_tilt = S.n_tilt
    s_n_weight = S.n_weight
    s_obs_vals = S.obs_vals
    s_pf = S.pf
    s_pi = S.pi
    w_floats = W.floats
    pi = s_pi
    pf = s_pf
    if pi[PI_SAME_PART] == 1:
        pf[PF_J_NEW] = w_floats[WF_J]
        pf[PF_LOGTAU_NEW] = w_floats[WF_LOGTAU]
        pf[PF_LOGTQ_NEW] = w_floats[WF_LOGTQ]
        pf[PF_LOG_TARGET] = 0.0
        return
    d = pp_d
    logtau = np.nan
    if pp_need_tau:
        for c in range(pi[PI_NL]):
            lab = s_labs[c]
            s_n_logt[lab] = part_log_trees(
                G, S, cache, s_comp_start[c], s_comp_start[c + 1], s_n_h1[lab], s_n_h2[lab], pp_cache_limit
            )
        logtq = quotient_log_trees(s_cross_new, d)
        logtau = logtq
        for lab in range(d):
            logtau += s_n_logt[lab]
        pf[PF_LOGTQ_NEW] = logtq
    else:
        for c in range(pi[PI_NL]):
            s_n_logt[s_labs[c]] = np.nan
        pf[PF_LOGTQ_NEW] = np.nan
    pf[PF_LOGTAU_NEW] = logtau
    if pp_special == 1:
        pf[PF_J_NEW] = logtau
        if pp_gamma == 1.0:
            pf[PF_LOG_TARGET] = 0.0
        else:
            pf[PF_LOG_TARGET] = (1.0 - pp_gamma) * (logtau - w_floats[WF_LOGTAU])
        return
    observable_values(
        P, d, s_n_weight, s_n_dem, s_n_rep, s_n_tilt, s_n_size, s_n_min,
        pi[PI_CUT_NEW], logtau, s_obs_vals, pp_n_eobs, counters,
    )
    jn = energy_from_obs(P, s_obs_vals)
    pf[PF_J_NEW] = jn
    lt = jn - w_floats[WF_J]
    if pp_gamma != 0.0:
        lt -= pp_gamma * (logtau - w_floats[WF_LOGTAU])
    pf[PF_LOG_TARGET] = lt


# ---------------------------------------------------------------------------
# commit


@inline_kernel
def commit(G, W, P, S):
    g_eu = G.eu
    g_ev = G.ev
    pp_d = P.d
    s_cross_new = S.cross_new
    s_labs = S.labs
    s_n_dem = S.n_dem
    s_n_h1 = S.n_h1
    s_n_h2 = S.n_h2
    s_n_logt = S.n_logt
    s_n_min = S.n_min
    s_n_rep = S.n_rep
    s_n_size = S.n_size
    s_n_tilt = S.n_tilt
    s_n_weight = S.n_weight
    s_newlab = S.newlab
    s_pf = S.pf
    s_pi = S.pi
    s_ulist = S.ulist
    w_cross = W.cross
    w_deg = W.deg
    w_floats = W.floats
    w_in_tree = W.in_tree
    w_ints = W.ints
    w_label = W.label
    w_marked = W.marked
    w_marked_list = W.marked_list
    w_nontree = W.nontree
    w_nt_pos = W.nt_pos
    w_p_dem = W.p_dem
    w_p_h1 = W.p_h1
    w_p_h2 = W.p_h2
    w_p_logt = W.p_logt
    w_p_min = W.p_min
    w_p_rep = W.p_rep
    w_p_size = W.p_size
    w_p_tilt = W.p_tilt
    w_p_weight = W.p_weight
    w_parent = W.parent
    w_parent_edge = W.parent_edge
    pi = s_pi
    pf = s_pf
    if pi[PI_LAZY] == 0:
        ep = pi[PI_EPLUS]
        em = pi[PI_EMINUS]
        a = g_eu[ep]
        b = g_ev[ep]
        if pi[PI_MSIDE] == 0:
            s = a
            t = b
        else:
            s = b
            t = a
        child = pi[PI_MCHILD]
        # re-root the detached subtree at s and hang it from t through e+
        prev = t
        prev_e = ep
        cur = s
        while True:
            nxt = w_parent[cur]
            nxt_e = w_parent_edge[cur]
            w_parent[cur] = prev
            w_parent_edge[cur] = prev_e
            if cur == child:
                break
            prev = cur
            prev_e = nxt_e
            cur = nxt
        w_in_tree[ep] = 1
        w_in_tree[em] = 0
        pos = w_nt_pos[ep]
        w_nontree[pos] = em
        w_nt_pos[em] = pos
        w_nt_pos[ep] = -1
        w_deg[a] += 1
        w_deg[b] += 1
        w_deg[g_eu[em]] -= 1
        w_deg[g_ev[em]] -= 1
    mo = pi[PI_MOLD]
    mn = pi[PI_MNEW]
    if mo >= 0 and mn != mo:
        w_marked[mo] = 0
        w_marked[mn] = 1
        w_marked_list[pi[PI_MIDX]] = mn
    if pi[PI_SAME_PART] == 0:
        for i in range(pi[PI_NU]):
            x = s_ulist[i]
            w_label[x] = s_newlab[x]
        for c in range(pi[PI_NL]):
            lab = s_labs[c]
            w_p_weight[lab] = s_n_weight[lab]
            w_p_dem[lab] = s_n_dem[lab]
            w_p_rep[lab] = s_n_rep[lab]
            w_p_tilt[lab] = s_n_tilt[lab]
            w_p_size[lab] = s_n_size[lab]
            w_p_min[lab] = s_n_min[lab]
            w_p_h1[lab] = s_n_h1[lab]
            w_p_h2[lab] = s_n_h2[lab]
            w_p_logt[lab] = s_n_logt[lab]
        d = pp_d
        for i in range(d):
            for j in range(d):
                w_cross[i, j] = s_cross_new[i, j]
        w_ints[0] = pi[PI_CUT_NEW]
        w_floats[WF_LOGTQ] = pf[PF_LOGTQ_NEW]
        w_floats[WF_J] = pf[PF_J_NEW]
        w_floats[WF_LOGTAU] = pf[PF_LOGTAU_NEW]


# ---------------------------------------------------------------------------
# steps


@inline_kernel
def propose(G, W, P, S, rng):
    """Draw one proposal into ``S.pi``/``S.pf``; returns its structural status.

    The transition ratio is filled separately by ``prepare_ratio``.
    """
    pp_p_cycle = P.p_cycle
    pp_single = P.single
    s_pi = S.pi
    _reset_proposal(S)
    if pp_single:
        if next_double(rng) < pp_p_cycle:
            s_pi[PI_KIND] = 1
            propose_cycle_step(G, W, S, rng)
            return ACCEPTED
        s_pi[PI_KIND] = 2
        return propose_marked_step(G, W, P, S, rng)
    s_pi[PI_KIND] = 0
    propose_cycle_step(G, W, S, rng)
    return propose_marked_step(G, W, P, S, rng)


@kernel
def mh_step(G, W, P, S, cache, rng, counters):
    pp_single = P.single
    s_pf = S.pf
    s_pi = S.pi
    status = propose(G, W, P, S, rng)
    s_pi[PI_STATUS] = status
    if status != ACCEPTED:
        return status
    status = evaluate_partition(G, W, P, S)
    s_pi[PI_STATUS] = status
    if status != ACCEPTED:
        return status
    if not pp_single:
        prepare_ratio(G, W, P, S, False)
    evaluate_target(G, W, P, S, cache, counters)
    la = s_pf[PF_LOG_TARGET] + math.log(s_pf[PF_RATIO])
    if la > 0.0:
        la = 0.0
    s_pf[PF_LOG_ACCEPT] = la
    log_u = math.log(next_open_closed(rng))
    s_pf[PF_LOG_U] = log_u
    if log_u <= la:
        commit(G, W, P, S)
        return ACCEPTED
    s_pi[PI_STATUS] = MH_REJECT
    return MH_REJECT


@kernel
def canonical_assignment(W, d, n, out):
    w_label = W.label
    w_p_min = W.p_min
    order = np.argsort(w_p_min)
    rank = np.empty(d, dtype=np.int64)
    for k in range(d):
        rank[order[k]] = k
    for v in range(n):
        out[v] = rank[w_label[v]] + 1


@kernel
def current_observables(P, W, d, out, counters):
    pp_obs_kind = P.obs_kind
    w_floats = W.floats
    w_ints = W.ints
    w_p_dem = W.p_dem
    w_p_min = W.p_min
    w_p_rep = W.p_rep
    w_p_size = W.p_size
    w_p_tilt = W.p_tilt
    w_p_weight = W.p_weight
    observable_values(
        P, d, w_p_weight, w_p_dem, w_p_rep, w_p_tilt, w_p_size, w_p_min,
        w_ints[0], w_floats[WF_LOGTAU], out, pp_obs_kind.shape[0], counters,
    )


@kernel
def refresh_target(G, W, P, S, cache, counters):
    """Recompute every part's tree count, the quotient term and J from scratch."""
    g_n = G.n
    pp_cache_limit = P.cache_limit
    pp_d = P.d
    pp_n_eobs = P.n_eobs
    pp_need_tau = P.need_tau
    pp_special = P.special
    s_obs_vals = S.obs_vals
    s_queue = S.queue
    w_cross = W.cross
    w_floats = W.floats
    w_ints = W.ints
    w_label = W.label
    w_p_dem = W.p_dem
    w_p_h1 = W.p_h1
    w_p_h2 = W.p_h2
    w_p_logt = W.p_logt
    w_p_min = W.p_min
    w_p_rep = W.p_rep
    w_p_size = W.p_size
    w_p_tilt = W.p_tilt
    w_p_weight = W.p_weight
    d = pp_d
    n = g_n
    if pp_need_tau:
        # bucket vertices by label into s_queue
        counts = np.zeros(d + 1, dtype=np.int64)
        for v in range(n):
            counts[w_label[v] + 1] += 1
        for lab in range(d):
            counts[lab + 1] += counts[lab]
        fill = counts.copy()
        for v in range(n):
            lab = w_label[v]
            s_queue[fill[lab]] = v
            fill[lab] += 1
        for lab in range(d):
            w_p_logt[lab] = part_log_trees(
                G, S, cache, counts[lab], counts[lab + 1], w_p_h1[lab], w_p_h2[lab], pp_cache_limit
            )
        logtq = quotient_log_trees(w_cross, d)
        w_floats[WF_LOGTQ] = logtq
        total = logtq
        for lab in range(d):
            total += w_p_logt[lab]
        w_floats[WF_LOGTAU] = total
    else:
        for lab in range(d):
            w_p_logt[lab] = np.nan
        w_floats[WF_LOGTQ] = np.nan
        w_floats[WF_LOGTAU] = np.nan
    if pp_special == 1:
        w_floats[WF_J] = w_floats[WF_LOGTAU]
    else:
        observable_values(
            P, d, w_p_weight, w_p_dem, w_p_rep, w_p_tilt, w_p_size, w_p_min,
            w_ints[0], w_floats[WF_LOGTAU], s_obs_vals, pp_n_eobs, counters,
        )
        w_floats[WF_J] = energy_from_obs(P, s_obs_vals)


@kernel
def run_steps(G, W, P, S, cache, rng, counters, steps, burn_in, record_every,
              rec_step, rec_acc, rec_obs, rec_assign, record_assign):
    g_n = G.n
    pp_d = P.d
    pp_obs_kind = P.obs_kind
    n_obs = pp_obs_kind.shape[0]
    row = np.empty(max(n_obs, 1), dtype=np.float64)
    r = 0
    for s in range(1, steps + 1):
        status = mh_step(G, W, P, S, cache, rng, counters)
        counters[status] += 1
        if s > burn_in and (s - burn_in) % record_every == 0:
            rec_step[r] = s
            rec_acc[r] = status == ACCEPTED
            current_observables(P, W, pp_d, row, counters)
            for i in range(n_obs):
                rec_obs[r, i] = row[i]
            if record_assign:
                canonical_assignment(W, pp_d, g_n, rec_assign[r])
            r += 1
    return r


# ---------------------------------------------------------------------------
# uniform spanning trees and the d = 2 independent sampler


@kernel
def wilson_tree(G, rng, root, parent, parent_edge, visited, nxt, nxt_e):
    """Uniform spanning tree by loop-erased random walks, as parent pointers."""
    g_adj_eid = G.adj_eid
    g_adj_nbr = G.adj_nbr
    g_adj_ptr = G.adj_ptr
    g_n = G.n
    n = g_n
    for v in range(n):
        visited[v] = 0
    visited[root] = 1
    parent[root] = -1
    parent_edge[root] = -1
    for i in range(n):
        u = i
        while visited[u] == 0:
            dg = g_adj_ptr[u + 1] - g_adj_ptr[u]
            k = g_adj_ptr[u] + randbelow(rng, dg)
            nxt[u] = g_adj_nbr[k]
            nxt_e[u] = g_adj_eid[k]
            u = nxt[u]
        u = i
        while visited[u] == 0:
            visited[u] = 1
            parent[u] = nxt[u]
            parent_edge[u] = nxt_e[u]
            u = nxt[u]


@kernel
def topological_order(parent, n, order):
    """Vertices ordered so every parent precedes its children."""
    ptr = np.zeros(n + 1, dtype=np.int64)
    root = -1
    for v in range(n):
        if parent[v] >= 0:
            ptr[parent[v] + 1] += 1
        else:
            root = v
    for v in range(n):
        ptr[v + 1] += ptr[v]
    kids = np.empty(max(n - 1, 1), dtype=np.int64)
    fill = ptr.copy()
    for v in range(n):
        p = parent[v]
        if p >= 0:
            kids[fill[p]] = v
            fill[p] += 1
    head = 0
    tail = 1
    order[0] = root
    while head < tail:
        x = order[head]
        head += 1
        for k in range(ptr[x], ptr[x + 1]):
            order[tail] = kids[k]
            tail += 1


@kernel
def recom2_draw(G, rng, lo, hi, uniform_edge, max_attempts, out):
    """One balanced 2-partition from a uniform tree; returns attempts used or -1.

    ``uniform_edge`` picks a uniform tree edge and rejects unbalanced cuts,
    which samples balanced (tree, edge) pairs uniformly. Otherwise a uniform
    choice among the tree's balanced edges is made.
    """
    g_n = G.n
    g_weight = G.weight
    n = g_n
    parent = np.empty(n, dtype=np.int64)
    parent_edge = np.empty(n, dtype=np.int64)
    visited = np.empty(n, dtype=np.int64)
    nxt = np.empty(n, dtype=np.int64)
    nxt_e = np.empty(n, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    sub = np.empty(n, dtype=np.float64)
    cands = np.empty(n, dtype=np.int64)
    total = 0.0
    for v in range(n):
        total += g_weight[v]
    for attempt in range(1, max_attempts + 1):
        wilson_tree(G, rng, 0, parent, parent_edge, visited, nxt, nxt_e)
        topological_order(parent, n, order)
        for v in range(n):
            sub[v] = g_weight[v]
        for k in range(n - 1, 0, -1):
            v = order[k]
            sub[parent[v]] += sub[v]
        cut_at = -1
        if uniform_edge:
            c = order[1 + randbelow(rng, n - 1)]
            s = sub[c]
            if lo <= s <= hi and lo <= total - s <= hi:
                cut_at = c
        else:
            nc = 0
            for k in range(1, n):
                c = order[k]
                s = sub[c]
                if lo <= s <= hi and lo <= total - s <= hi:
                    cands[nc] = c
                    nc += 1
            if nc > 0:
                cut_at = cands[randbelow(rng, nc)]
        if cut_at < 0:
            continue
        for v in range(n):
            out[v] = 0
        out[cut_at] = 1
        for k in range(n):
            v = order[k]
            if v != cut_at and parent[v] >= 0 and out[parent[v]] == 1:
                out[v] = 1
        flip = out[0]
        for v in range(n):
            out[v] = (out[v] ^ flip) + 1
        return attempt
    return -1
