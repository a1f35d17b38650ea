"""Two-stage decomposition orchestrator and the editing-analogy procedure.

Stage 1 walks a pool of pending nodes breadth-first (shallowest first),
asking the proposers for candidate splits and accepting the best one
unless the deferral rule sends the node to stage 2.  Accepted children are
classified: leaf-like children are marked solved, everything else becomes
pending.  Stage 2 runs the depth-ordered substructure search on each
deferred node and merges the result.  Finally every leaf is bound with a
full-budget fit and the whole tree's continuous parameters are refined
jointly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .envmap import EnvLibrary, default_library
from .errors import DecompositionFailed, DimensionMismatch, EditNotFound, NoProposal
from .features import FeatureLoss, objective_image, pixel_rms
from .image import ShadingImage, normal_field
from .metrics import psnr, ssim
from .optimize import (FitConfig, SearchConfig, fit_leaf, optimize_whole_tree,
                       search_substructure)
from .propose import (CandidateSplit, ChildVerdict, ProposeConfig, classify_child,
                      leaf_likeness, propose_splits, should_defer)
from .render import evaluate_mask, render_tree
from .structures import skeleton_signature, skeleton_of
from .tree import (Interior, Leaf, LeafFamily, OpKind, ShadeTree, iter_leaves,
                   quantize_tree, substitute_subtree, subtree_at)

__all__ = ["PipelineConfig", "NodeStatus", "NodePool", "DecompositionReport",
           "decompose", "run_analogy"]

PHI_35DB = 10.0 ** (-35.0 / 20.0)    # pixel RMS at 35 dB PSNR


@dataclass
class PipelineConfig:
    seed: int = 0
    propose: ProposeConfig = field(default_factory=ProposeConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    leaf_fit: FitConfig = field(default_factory=FitConfig)
    phi: float = PHI_35DB            # stage-2 stop threshold
    fail_loss: float = 0.1           # budget-exhausted root above this loss fails
    tie_epsilon: float = 0.012       # candidates this close re-rank by child simplicity
    search_max_depth: int = 3
    max_stage1_depth: int = 5        # deeper pending nodes are force-deferred
    stage2_enabled: bool = True
    overall_opt: bool = True
    whole_tree_evals: int = 700
    analogy_diff_threshold: float = 0.05

    def loss(self) -> FeatureLoss:
        return self.search.loss


class NodeStatus(Enum):
    PENDING = "pending"
    DECOMPOSED = "decomposed"
    LEAF = "leaf"
    DEFERRED = "deferred"
    SOLVED = "solved"

    @property
    def terminal(self) -> bool:
        return self in (NodeStatus.LEAF, NodeStatus.SOLVED)


@dataclass
class NodeRecord:
    node_id: int
    image: ShadingImage
    depth: int
    status: NodeStatus = NodeStatus.PENDING
    verdict: ChildVerdict | None = None
    subtree: ShadeTree | None = None
    note: str = ""


@dataclass
class Edge:
    left: int
    right: int
    op: OpKind
    mask: object | None


class NodePool:
    """Bookkeeping of node states and linkage during decomposition."""

    def __init__(self, root_image: ShadingImage):
        self.nodes: dict[int, NodeRecord] = {}
        self.edges: dict[int, Edge] = {}
        self.root_id = self.add(root_image, depth=1)

    def add(self, image: ShadingImage, depth: int) -> int:
        node_id = len(self.nodes)
        self.nodes[node_id] = NodeRecord(node_id, image, depth)
        return node_id

    def link(self, parent: int, left: int, right: int, op: OpKind, mask) -> None:
        if parent in self.edges:
            raise ValueError(f"node {parent} already decomposed")
        self.edges[parent] = Edge(left, right, op, mask)
        self.nodes[parent].status = NodeStatus.DECOMPOSED

    def pending(self) -> list[NodeRecord]:
        return sorted((r for r in self.nodes.values() if r.status is NodeStatus.PENDING),
                      key=lambda r: (r.depth, r.node_id))

    def by_status(self, status: NodeStatus) -> list[NodeRecord]:
        return sorted((r for r in self.nodes.values() if r.status is status),
                      key=lambda r: r.node_id)

    def validate(self) -> None:
        """Check the pool invariants; raises AssertionError on violation."""
        assert self.root_id in self.nodes
        seen: set[int] = set()

        def walk(node_id: int):
            assert node_id not in seen, "edges must form a tree"
            seen.add(node_id)
            record = self.nodes[node_id]
            if node_id in self.edges:
                assert record.status is NodeStatus.DECOMPOSED
                edge = self.edges[node_id]
                walk(edge.left)
                walk(edge.right)
            else:
                assert record.status is not NodeStatus.DECOMPOSED

        walk(self.root_id)
        for record in self.nodes.values():
            assert record.node_id in seen, f"orphan node {record.node_id}"
            terminal = record.status.terminal
            assert terminal == (record.status in (NodeStatus.LEAF, NodeStatus.SOLVED))


@dataclass
class NodeTrace:
    node_id: int
    depth: int
    status: str
    action: str
    seconds: float
    candidates: list[dict] = field(default_factory=list)
    chosen: dict | None = None
    verdict: dict | None = None


@dataclass
class DecompositionReport:
    tree: ShadeTree
    psnr: float
    ssim: float
    input_image: ShadingImage
    rerender: ShadingImage
    pool: NodePool
    node_traces: list[NodeTrace]
    stage2: list[dict]
    whole_tree: dict
    seconds: float
    failed: bool = False

    def summary(self) -> dict:
        return {
            "psnr_db": self.psnr,
            "ssim": self.ssim,
            "nodes": len(self.pool.nodes),
            "deferred": len([t for t in self.node_traces if t.status == "deferred"]),
            "seconds": round(self.seconds, 3),
            "failed": self.failed,
        }


def _node_rng(seed: int, node_id: int, stage: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, node_id, stage]))


def _pick_candidate(candidates: list[CandidateSplit], config: PipelineConfig,
                    envlib: EnvLibrary) -> CandidateSplit:
    """Best candidate by l_select; near-ties re-rank by child leaf-likeness.

    Deterministic proposers often produce several pixel-exact splits whose
    l_select values differ only in the regularizer margins; among those the
    split whose children are closest to renderable leaves recurses best.
    """
    best_score = candidates[0].scores.l_select
    ties = [c for c in candidates if c.scores.l_select - best_score <= config.tie_epsilon]
    if len(ties) == 1:
        return ties[0]
    scored = []
    for order, cand in enumerate(ties):
        simplicity = (leaf_likeness(cand.left, envlib) +
                      leaf_likeness(cand.right, envlib))
        scored.append((simplicity, order, cand))
    scored.sort(key=lambda item: (item[0], item[1]))
    return scored[0][2]


def _candidate_row(cand: CandidateSplit) -> dict:
    s = cand.scores
    return {"op": cand.op.value, "source": cand.source,
            "l_recon": s.l_recon, "l_sim": s.l_sim, "l_blank": s.l_blank,
            "l_white": s.l_white, "l_select": s.l_select}


def _verdict_row(v: ChildVerdict) -> dict:
    return {"is_leaf": v.is_leaf,
            "family": v.family.value if v.family else None,
            "fit_rmse": v.fit_loss}


def decompose(image: ShadingImage, config: PipelineConfig | None = None,
              envlib: EnvLibrary | None = None,
              progress=None) -> DecompositionReport:
    """Invert one shading image into a shade tree; see the module docstring.

    `progress`, when given, is called with small dict events as nodes are
    decomposed, deferred, and solved (the service's polling channel).

    Raises DecompositionFailed (with the best-effort report attached) only
    when the root itself was deferred and the stage-2 search ran out of
    budget before reaching the stop threshold.
    """
    config = config or PipelineConfig()
    envlib = envlib or default_library()
    notify = progress if progress is not None else (lambda event: None)
    t_start = time.perf_counter()
    pool = NodePool(image)
    traces: list[NodeTrace] = []

    def enter_pool(node_id: int) -> None:
        """Classify a node as it enters the pool; leaves are solved on the spot."""
        record = pool.nodes[node_id]
        record.verdict = classify_child(record.image, envlib, config.propose,
                                        _node_rng(config.seed, node_id, 1))
        if record.verdict.is_leaf:
            record.status = NodeStatus.LEAF

    enter_pool(pool.root_id)

    # ---- stage 1: recursive amortized-style expansion --------------------
    while True:
        pending = pool.pending()
        if not pending:
            break
        record = pending[0]
        t0 = time.perf_counter()
        rng = _node_rng(config.seed, record.node_id)
        trace = NodeTrace(record.node_id, record.depth, "", "", 0.0,
                          verdict=_verdict_row(record.verdict))

        if record.depth >= config.max_stage1_depth:
            record.status = NodeStatus.DEFERRED
            record.note = "max stage-1 depth"
            trace.action = "force-defer"
        else:
            try:
                candidates = propose_splits(record.image, config.propose.t_samples,
                                            rng, config.propose, envlib)
            except NoProposal as exc:
                record.status = NodeStatus.DEFERRED
                record.note = f"no proposal ({exc})"
                trace.action = "no-proposal; deferred"
                candidates = None
            if candidates is not None:
                trace.candidates = [_candidate_row(c) for c in candidates]
                best = _pick_candidate(candidates, config, envlib)
                if should_defer(best, config.propose.tau,
                                config.propose.defer_when_above):
                    record.status = NodeStatus.DEFERRED
                    trace.action = "deferred (l_select above tau)"
                else:
                    left_id = pool.add(best.left, record.depth + 1)
                    right_id = pool.add(best.right, record.depth + 1)
                    pool.link(record.node_id, left_id, right_id, best.op, best.mask)
                    trace.chosen = _candidate_row(best)
                    trace.action = f"split {best.op.value}"
                    enter_pool(left_id)
                    enter_pool(right_id)
        pool.validate()
        trace.status = pool.nodes[record.node_id].status.value
        trace.seconds = time.perf_counter() - t0
        traces.append(trace)
        notify({"event": trace.action.split(" ")[0], "node_id": record.node_id,
                "depth": record.depth, "status": trace.status})

    # ---- stage 2: substructure search on deferred nodes ------------------
    stage2_rows: list[dict] = []
    root_budget_exhausted = False
    if config.stage2_enabled:
        for record in pool.by_status(NodeStatus.DEFERRED):
            t0 = time.perf_counter()
            result = search_substructure(record.image, config.search_max_depth,
                                         config.phi, config.search, envlib,
                                         _node_rng(config.seed, record.node_id, 2))
            record.subtree = result.structure
            record.status = NodeStatus.SOLVED
            stage2_rows.append({
                "node_id": record.node_id, "signature": result.signature,
                "loss": result.loss, "evals": result.evals_used,
                "stop": result.stop, "skeletons": len(result.trace),
                "seconds": time.perf_counter() - t0,
            })
            if record.node_id == pool.root_id and result.stop == "budget" \
                    and result.loss >= config.fail_loss:
                root_budget_exhausted = True
            notify({"event": "solved", "node_id": record.node_id,
                    "signature": result.signature, "loss": result.loss})
        pool.validate()

    # ---- stage 3: bind leaves with the full fitting budget ---------------
    for record in pool.by_status(NodeStatus.LEAF):
        family = record.verdict.family
        params, _ = fit_leaf(record.image, family, config.leaf_fit, envlib,
                             _node_rng(config.seed, record.node_id, 3))
        record.subtree = Leaf(family, params)

    # ---- assemble + overall optimization ----------------------------------
    tree = _assemble(pool, pool.root_id, config, envlib)
    norms = normal_field(image.width, image.height)
    loss_cfg = config.loss()
    whole: dict = {"enabled": config.overall_opt}
    whole["input_loss"] = objective_image(render_tree(tree, norms, envlib),
                                          image, loss_cfg)
    if config.overall_opt:
        tree, final_loss, cma_result = optimize_whole_tree(
            tree, image, config.search, envlib,
            _node_rng(config.seed, pool.root_id, 4),
            max_evals=config.whole_tree_evals)
        whole["final_loss"] = final_loss
        whole["history"] = cma_result.history if cma_result is not None else []
    else:
        whole["final_loss"] = whole["input_loss"]
        whole["history"] = []

    tree = quantize_tree(tree)
    rerender = render_tree(tree, norms, envlib)
    report = DecompositionReport(
        tree=tree,
        psnr=psnr(rerender, image),
        ssim=ssim(rerender, image),
        input_image=image,
        rerender=rerender,
        pool=pool,
        node_traces=traces,
        stage2=stage2_rows,
        whole_tree=whole,
        seconds=time.perf_counter() - t_start,
        failed=root_budget_exhausted,
    )
    if root_budget_exhausted:
        raise DecompositionFailed("stage-2 budget exhausted on the root node",
                                  report=report)
    return report


def _assemble(pool: NodePool, node_id: int, config: PipelineConfig,
              envlib: EnvLibrary) -> ShadeTree:
    record = pool.nodes[node_id]
    if record.status is NodeStatus.DECOMPOSED:
        edge = pool.edges[node_id]
        return Interior(edge.op,
                        _assemble(pool, edge.left, config, envlib),
                        _assemble(pool, edge.right, config, envlib),
                        edge.mask)
    if record.subtree is not None:
        return record.subtree
    # Deferred but unsolved (stage 2 disabled): best-effort single leaf.
    if record.verdict is not None and record.verdict.params is not None:
        return Leaf(record.verdict.family, record.verdict.params)
    params, _ = fit_leaf(record.image, LeafFamily.ALBEDO, config.propose.classify_fit,
                         envlib, _node_rng(config.seed, node_id, 5))
    return Leaf(LeafFamily.ALBEDO, params)


# ---------------------------------------------------------------------------
# Visual shading editing analogy
# ---------------------------------------------------------------------------

def _canonicalize(tree: ShadeTree) -> ShadeTree:
    """Sort commutative children by structural signature for stable diffs."""
    if isinstance(tree, Leaf):
        return tree
    left = _canonicalize(tree.left)
    right = _canonicalize(tree.right)
    if tree.op in (OpKind.MULTIPLY, OpKind.SCREEN):
        if skeleton_signature(skeleton_of(right)) < skeleton_signature(skeleton_of(left)):
            left, right = right, left
    return Interior(tree.op, left, right, tree.mask)


def run_analogy(example_source: ShadingImage, example_edited: ShadingImage,
                test_source: ShadingImage, config: PipelineConfig | None = None,
                envlib: EnvLibrary | None = None) -> tuple[ShadingImage, dict]:
    """Transfer the edit shown by (A, A') onto B; returns (prediction, info).

    The three images are decomposed with identical configuration; the
    minimal differing subtree between the trees of A and A' (matched by
    per-node re-render RMSE) is substituted at the analogous position in
    B's tree.  When no difference exceeds the threshold the edit is empty
    and B's own image is returned unchanged.
    """
    config = config or PipelineConfig()
    envlib = envlib or default_library()
    size = example_source.width
    if example_edited.size != example_source.size or test_source.size != example_source.size:
        raise DimensionMismatch("analogy images must share one grid")
    norms = normal_field(size, size)

    tree_a = _canonicalize(decompose(example_source, config, envlib).tree)
    tree_ae = _canonicalize(decompose(example_edited, config, envlib).tree)
    report_b = decompose(test_source, config, envlib)
    tree_b = _canonicalize(report_b.tree)

    def render(t: ShadeTree) -> ShadingImage:
        return render_tree(t, norms, envlib)

    def differs(t1: ShadeTree, t2: ShadeTree) -> bool:
        return pixel_rms(render(t1), render(t2)) > config.analogy_diff_threshold

    def masks_differ(n1: Interior, n2: Interior) -> bool:
        if (n1.mask is None) != (n2.mask is None):
            return True
        if n1.mask is None:
            return False
        m1 = evaluate_mask(n1.mask, norms)
        m2 = evaluate_mask(n2.mask, norms)
        return float(np.sqrt(np.mean((m1 - m2) ** 2))) > 0.05

    def diff_path(t1: ShadeTree, t2: ShadeTree) -> tuple[str, ...] | None:
        if not differs(t1, t2):
            return None
        if (isinstance(t1, Interior) and isinstance(t2, Interior)
                and t1.op is t2.op and not masks_differ(t1, t2)):
            dl = differs(t1.left, t2.left)
            dr = differs(t1.right, t2.right)
            if dl and not dr:
                sub = diff_path(t1.left, t2.left)
                return ("L",) + (sub or ())
            if dr and not dl:
                sub = diff_path(t1.right, t2.right)
                return ("R",) + (sub or ())
        return ()

    try:
        path = diff_path(tree_a, tree_ae)
        if path is None:
            raise EditNotFound("no subtree difference exceeds the threshold")
    except EditNotFound:
        # Empty edit: B's own shading is the prediction, bit-exactly.
        return test_source, {"edit": None, "b_psnr": report_b.psnr,
                             "note": "identity edit; returning B unchanged"}
    replacement = subtree_at(tree_ae, path)
    edited_b = _apply_analogous(tree_b, tree_a, path, replacement)
    prediction = render(quantize_tree(edited_b))
    info = {"edit": {"path": list(path),
                     "replacement_signature": skeleton_signature(skeleton_of(replacement))},
            "b_psnr": report_b.psnr}
    return prediction, info


def _apply_analogous(tree_b: ShadeTree, tree_a: ShadeTree, path: tuple[str, ...],
                     replacement: ShadeTree) -> ShadeTree:
    """Substitute `replacement` at `path` in B when the walk stays compatible
    with A's structure; otherwise fall back to the first leaf of the same
    family, then to the root."""
    node_a, node_b = tree_a, tree_b
    compatible = True
    for step in path:
        if not (isinstance(node_a, Interior) and isinstance(node_b, Interior)
                and node_a.op is node_b.op):
            compatible = False
            break
        node_a = node_a.left if step == "L" else node_a.right
        node_b = node_b.left if step == "L" else node_b.right
    if compatible:
        return substitute_subtree(tree_b, path, replacement)
    target_a = subtree_at(tree_a, path)
    if isinstance(target_a, Leaf):
        for leaf_path, leaf in iter_leaves(tree_b):
            if leaf.family is target_a.family:
                return substitute_subtree(tree_b, leaf_path, replacement)
    return replacement
