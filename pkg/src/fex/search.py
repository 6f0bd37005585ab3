"""Search orchestration: sample operator sequences from the controller, tune
each candidate's parameters, keep the best in a bounded pool, update the
policy, and finally fine-tune the pool on the full loss.

Progressively expanding trees wrap the loop: smaller skeletons are searched
first and the first tree whose fine-tuned best loss reaches the tolerance
stops the expansion.

All candidate-level randomness (parameter draws, row subsamples) derives from
the master seed plus the sequence content and iteration index, never from
scheduling, so results are identical for any worker count and runs can resume
from a checkpoint bit-exactly.
"""

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import multiprocessing
import numpy as np

from .controller import Controller, ControllerState, reward_of
from .exprtree import (
    ExpressionInstance,
    OperatorDictionary,
    TreeSkeleton,
    init_theta,
    instantiate,
)
from .optimize import OptimizerConfig, adam_minimize, coarse_tune
from .seeding import rng_for, seed_for

CHECKPOINT_VERSION = 1


@dataclass
class SearchConfig:
    iterations: int = 50  # T: controller updates per tree
    batch_size: int = 100  # N: sequences sampled per iteration
    pool_size: int = 10  # K
    risk: float = 0.05  # nu
    ctrl_lr: float = 2e-3  # eta
    hidden: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    leaf_counts: tuple = (2, 4, 8)
    non_leaf_unary: bool = False
    epsilon: float = 0.0
    seed: int = 0
    workers: int = 1
    subsample: int = 4096

    def __post_init__(self):
        if min(self.iterations, self.batch_size, self.pool_size) < 1:
            raise ValueError("iterations, batch_size and pool_size must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    @classmethod
    def desk(cls, **overrides) -> "SearchConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "SearchConfig":
        overrides.setdefault("iterations", 500)
        overrides.setdefault("batch_size", 5000)
        return cls(**overrides)


@dataclass
class PoolEntry:
    sequence: tuple
    reward: float
    loss: float
    theta: np.ndarray


class CandidatePool:
    """Bounded top-K store of operator sequences keyed by sequence.

    A duplicate offer replaces its entry only when the new reward is strictly
    higher; at capacity the minimum-reward entry is evicted only by a strictly
    better offer (ties keep the incumbent).
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("pool capacity must be >= 1")
        self.capacity = capacity
        self.entries: dict = {}

    def __len__(self) -> int:
        return len(self.entries)

    def offer(self, sequence, reward: float, theta, loss: float = None) -> bool:
        if not 0.0 <= reward <= 1.0:
            raise ValueError("reward must lie in [0, 1]")
        sequence = tuple(int(i) for i in sequence)
        loss = (1.0 / reward - 1.0) if (loss is None and reward > 0) else loss
        entry = PoolEntry(sequence, float(reward), loss, np.asarray(theta, float).copy())
        if sequence in self.entries:
            if reward > self.entries[sequence].reward:
                self.entries[sequence] = entry
                return True
            return False
        if len(self.entries) < self.capacity:
            self.entries[sequence] = entry
            return True
        worst = self.min_entry()
        if reward > worst.reward:
            del self.entries[worst.sequence]
            self.entries[sequence] = entry
            return True
        return False

    def min_entry(self) -> PoolEntry:
        return min(self.entries.values(), key=lambda e: e.reward)

    def best_entry(self) -> PoolEntry:
        return max(self.entries.values(), key=lambda e: e.reward)

    def sorted_entries(self):
        return sorted(self.entries.values(), key=lambda e: -e.reward)


@dataclass
class HistoryRow:
    iteration: int
    best_loss: float  # best over everything seen so far (cumulative)
    mean_loss: float  # mean over this batch's finite candidate losses
    best_reward: float
    mean_reward: float


@dataclass
class SearchResult:
    skeleton: TreeSkeleton
    pool: CandidatePool
    history: list
    controller: Controller
    feature_names: tuple

    def best_instance(self, opdict: OperatorDictionary) -> ExpressionInstance:
        entry = self.pool.best_entry()
        inst = instantiate(self.skeleton, entry.sequence, opdict, self.feature_names)
        return inst.with_theta(entry.theta)

    @property
    def best_loss(self) -> float:
        return self.pool.best_entry().loss if len(self.pool) else np.inf


# -- worker-side candidate evaluation ----------------------------------------

_WORKER_CTX = {}


def _init_worker(objective, skeleton, opdict, feature_names, opt_cfg, seed, tree_tag):
    _WORKER_CTX.update(
        objective=objective,
        skeleton=skeleton,
        opdict=opdict,
        feature_names=feature_names,
        opt_cfg=opt_cfg,
        seed=seed,
        tree_tag=tree_tag,
    )


def _tune_candidate(objective, skeleton, opdict, feature_names, opt_cfg,
                    seed, tree_tag, sequence, iteration):
    """Coarse-tune one operator sequence; all randomness is content-derived."""
    inst = instantiate(skeleton, sequence, opdict, feature_names, rng=0)
    rows = objective.sample_rows(seed_for("rows", seed, tree_tag, iteration, sequence))
    starts = [
        init_theta(
            skeleton,
            len(feature_names),
            rng_for("theta", seed, tree_tag, iteration, sequence, restart),
            wrapper_mode="identity" if restart % 2 == 0 else "complement",
        )
        for restart in range(opt_cfg.restarts)
    ]
    f = objective.make_objective_fn(inst, rows)
    theta, loss = coarse_tune(f, starts, opt_cfg)
    return theta, loss


def _tune_candidate_task(args):
    sequence, iteration = args
    ctx = _WORKER_CTX
    theta, loss = _tune_candidate(
        ctx["objective"], ctx["skeleton"], ctx["opdict"], ctx["feature_names"],
        ctx["opt_cfg"], ctx["seed"], ctx["tree_tag"], sequence, iteration,
    )
    return sequence, theta, loss


def _finetune_task(args):
    sequence, theta, steps, lr = args
    ctx = _WORKER_CTX
    inst = instantiate(
        ctx["skeleton"], sequence, ctx["opdict"], ctx["feature_names"], rng=0
    )
    f = ctx["objective"].make_objective_fn(inst, rows=None)
    theta, loss = adam_minimize(f, theta, steps, lr)
    return sequence, theta, loss


# -- checkpoint state ----------------------------------------------------------


@dataclass
class SearchState:
    """Everything needed to resume a search loop bit-exactly."""

    tree_tag: str
    iteration: int
    controller_state: ControllerState
    rng_state: dict
    pool_entries: list
    history: list
    finetuned: bool

    def to_doc(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "tree_tag": self.tree_tag,
            "iteration": self.iteration,
            "controller": {
                "w1": self.controller_state.w1,
                "b1": self.controller_state.b1,
                "w2": self.controller_state.w2,
                "b2": self.controller_state.b2,
            },
            "rng_state": json.loads(json.dumps(self.rng_state)),
            "pool": [
                {
                    "sequence": list(e.sequence),
                    "reward": e.reward,
                    "loss": None if e.loss is None else float(e.loss),
                    "theta": np.asarray(e.theta).tolist(),
                }
                for e in self.pool_entries
            ],
            "history": [
                [h.iteration, h.best_loss, h.mean_loss, h.best_reward, h.mean_reward]
                for h in self.history
            ],
            "finetuned": self.finetuned,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "SearchState":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint version")
        ctrl = doc["controller"]
        return cls(
            tree_tag=doc["tree_tag"],
            iteration=doc["iteration"],
            controller_state=ControllerState(
                w1=ctrl["w1"], b1=ctrl["b1"], w2=ctrl["w2"], b2=ctrl["b2"]
            ),
            rng_state=doc["rng_state"],
            pool_entries=[
                PoolEntry(
                    sequence=tuple(e["sequence"]),
                    reward=e["reward"],
                    loss=e["loss"],
                    theta=np.asarray(e["theta"]),
                )
                for e in doc["pool"]
            ],
            history=[HistoryRow(*row) for row in doc["history"]],
            finetuned=doc["finetuned"],
        )


def _capture_state(tree_tag, iteration, controller, rng, pool, history, finetuned):
    # entries are captured in insertion order so a resumed pool breaks reward
    # ties exactly like the uninterrupted run
    return SearchState(
        tree_tag=tree_tag,
        iteration=iteration,
        controller_state=controller.get_state(),
        rng_state=rng.bit_generator.state,
        pool_entries=[replace(e, theta=e.theta.copy()) for e in pool.entries.values()],
        history=list(history),
        finetuned=finetuned,
    )


# -- the searching loop ---------------------------------------------------------


def search_loop(
    objective,
    skeleton: TreeSkeleton,
    opdict: OperatorDictionary,
    cfg: SearchConfig,
    tree_tag: str = None,
    state: SearchState = None,
    checkpoint_cb=None,
) -> SearchResult:
    """One full search over a fixed tree shape, then pool fine-tuning.

    Per iteration: sample ``batch_size`` sequences, coarse-tune each distinct
    one (duplicates within the iteration are computed once and reuse the
    reward), offer them to the pool, and apply one risk-seeking policy-gradient
    update.  Candidates with non-finite loss score reward 0.
    """
    feature_names = tuple(objective.feature_names)
    tree_tag = tree_tag or f"tree{skeleton.leaf_count}"
    slot_sizes = skeleton.slot_sizes(opdict)
    controller = Controller(
        slot_sizes,
        hidden=cfg.hidden,
        lr=cfg.ctrl_lr,
        risk=cfg.risk,
        rng=rng_for("controller-init", cfg.seed, tree_tag),
    )
    rng = rng_for("sampling", cfg.seed, tree_tag)
    pool = CandidatePool(cfg.pool_size)
    history = []
    start_iter = 0
    finetuned = False
    if state is not None:
        controller.set_state(state.controller_state)
        rng.bit_generator.state = state.rng_state
        for e in state.pool_entries:
            pool.entries[e.sequence] = replace(e, theta=e.theta.copy())
        history = list(state.history)
        start_iter = state.iteration
        finetuned = state.finetuned

    objective = _with_subsample(objective, cfg.subsample)
    pool_executor = _make_executor(
        cfg, objective, skeleton, opdict, feature_names, tree_tag
    )
    try:
        for iteration in range(start_iter, cfg.iterations):
            seqs, _logps = controller.sample(cfg.batch_size, rng)
            uniq = list(dict.fromkeys(tuple(int(i) for i in row) for row in seqs))
            results = _run_tasks(
                pool_executor,
                cfg,
                _tune_candidate_task,
                [(seq, iteration) for seq in uniq],
                objective, skeleton, opdict, feature_names, tree_tag,
            )
            losses = {seq: loss for seq, _theta, loss in results}
            thetas = {seq: theta for seq, theta, _loss in results}
            for seq in uniq:
                pool.offer(seq, reward_of(losses[seq]), thetas[seq], losses[seq])

            sample_losses = np.array(
                [losses[tuple(int(i) for i in row)] for row in seqs]
            )
            rewards = np.array([reward_of(l) for l in sample_losses])
            controller.update(seqs, rewards)

            best = pool.best_entry()
            finite = sample_losses[np.isfinite(sample_losses)]
            history.append(
                HistoryRow(
                    iteration=iteration,
                    best_loss=best.loss,
                    mean_loss=float(np.mean(finite)) if finite.size else np.inf,
                    best_reward=best.reward,
                    mean_reward=float(np.mean(rewards)),
                )
            )
            if checkpoint_cb is not None:
                checkpoint_cb(
                    _capture_state(
                        tree_tag, iteration + 1, controller, rng, pool, history, False
                    )
                )

        if not finetuned:
            _finetune_pool(pool_executor, cfg, pool, objective, skeleton, opdict,
                           feature_names, tree_tag)
            if checkpoint_cb is not None:
                checkpoint_cb(
                    _capture_state(
                        tree_tag, cfg.iterations, controller, rng, pool, history, True
                    )
                )
    finally:
        if pool_executor is not None:
            pool_executor.shutdown()

    return SearchResult(
        skeleton=skeleton,
        pool=pool,
        history=history,
        controller=controller,
        feature_names=feature_names,
    )


def _with_subsample(objective, subsample):
    if getattr(objective, "subsample", None) == subsample:
        return objective
    try:
        return replace(objective, subsample=subsample)
    except TypeError:  # duck-typed objectives in tests need no subsample
        return objective


def _make_executor(cfg, objective, skeleton, opdict, feature_names, tree_tag):
    if cfg.workers <= 1:
        return None
    ctx = multiprocessing.get_context("fork")
    return ProcessPoolExecutor(
        max_workers=cfg.workers,
        mp_context=ctx,
        initializer=_init_worker,
        initargs=(objective, skeleton, opdict, feature_names, cfg.optimizer,
                  cfg.seed, tree_tag),
    )


def _run_tasks(executor, cfg, task_fn, tasks, objective, skeleton, opdict,
               feature_names, tree_tag):
    if executor is None:
        _init_worker(objective, skeleton, opdict, feature_names, cfg.optimizer,
                     cfg.seed, tree_tag)
        return [task_fn(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * cfg.workers))
    return list(executor.map(task_fn, tasks, chunksize=chunk))


def _finetune_pool(executor, cfg, pool, objective, skeleton, opdict,
                   feature_names, tree_tag):
    """Adam on the full (non-subsampled) loss for every pool member; best-seen
    semantics mean the stored loss never exceeds the full loss at the coarse
    parameters."""
    entries = pool.sorted_entries()
    tasks = [
        (e.sequence, e.theta, cfg.optimizer.finetune_steps, cfg.optimizer.finetune_lr)
        for e in entries
    ]
    results = _run_tasks(executor, cfg, _finetune_task, tasks, objective, skeleton,
                         opdict, feature_names, tree_tag)
    for seq, theta, loss in results:
        pool.entries[seq] = PoolEntry(seq, reward_of(loss), loss, theta)


@dataclass
class ProgressiveResult:
    tree_results: dict  # leaf_count -> SearchResult
    best_leaf_count: int
    opdict: OperatorDictionary

    @property
    def best_result(self) -> SearchResult:
        return self.tree_results[self.best_leaf_count]

    @property
    def best_loss(self) -> float:
        return self.best_result.best_loss

    def best_instance(self) -> ExpressionInstance:
        return self.best_result.best_instance(self.opdict)


def progressive_search(
    objective,
    opdict: OperatorDictionary,
    cfg: SearchConfig,
    checkpoint_cb=None,
    resume_states: dict = None,
) -> ProgressiveResult:
    """Search trees of increasing size; stop at the first whose fine-tuned
    best loss is within the tolerance, and report the best across all trees
    tried."""
    tree_results = {}
    best_leaf, best_loss = None, np.inf
    for leaf_count in cfg.leaf_counts:
        skeleton = TreeSkeleton(leaf_count=leaf_count, non_leaf_unary=cfg.non_leaf_unary)
        tag = f"tree{leaf_count}"
        state = (resume_states or {}).get(tag)
        result = search_loop(
            objective, skeleton, opdict, cfg, tree_tag=tag, state=state,
            checkpoint_cb=checkpoint_cb,
        )
        tree_results[leaf_count] = result
        if result.best_loss < best_loss:
            best_leaf, best_loss = leaf_count, result.best_loss
        if result.best_loss <= cfg.epsilon:
            break
    return ProgressiveResult(
        tree_results=tree_results, best_leaf_count=best_leaf, opdict=opdict
    )
