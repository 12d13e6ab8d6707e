"""End-to-end experiment orchestration and report emission.

``run_experiment`` walks the stages data, partition, plan (non-i.i.d. only),
enforce, train, eval and reports, timing each one. Everything lands in the
run directory; if a stage fails, the files written so far are renamed with a
``.partial`` suffix and the manifest records the failing stage.
"""

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import __version__
from .clustering import ClusterPlan, validate_plan
from .data import (
    PartitionSpec,
    enforce_proportions,
    gen_synthetic_subspaces,
    load_dataset,
    load_mnist,
    partition,
    save_dataset,
    train_test_split,
)
from .encoder import forward, load_checkpoint, save_checkpoint
from .errors import AssumptionViolated, Dmcr2Error, PlanMismatch
from .evaluation import (
    NearestSubspaceClassifier,
    check_theorem1,
    cosine_similarity_matrix,
    geometry_report,
    global_encoding,
    label_order,
    write_heatmap_svg,
)
from .iid import dsgd_embed, run_dsgd_baseline, run_iid
from .network import build_topology, complete_topology, node_label
from .noniid import run_noniid, write_cluster_trace

log = logging.getLogger(__name__)


def fmt(x):
    """Fixed 17-significant-digit rendering so reruns diff byte for byte."""
    return f"{float(x):.17g}"


class StageError(Dmcr2Error):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunManifest:
    config_hash: str
    code_version: str = __version__
    started: str = ""
    ended: str = ""
    files: List[str] = field(default_factory=list)
    durations: Dict[str, float] = field(default_factory=dict)
    status: str = "running"
    failed_stage: str = ""
    error: str = ""
    state: object = field(default=None, repr=False)
    report: object = field(default=None, repr=False)

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "started": self.started,
            "ended": self.ended,
            "files": sorted(self.files),
            "durations": self.durations,
            "status": self.status,
            "failed_stage": self.failed_stage,
            "error": self.error,
        }

    def write(self, out):
        with open(Path(out) / "manifest.json", "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def load_data(cfg):
    """``(train, test)`` Datasets for a config."""
    d = cfg["data"]
    if d["source"] == "synthetic":
        ds = gen_synthetic_subspaces(
            d["n_classes"], d["class_dim"], d["per_class"], d["ambient_dim"], d["noise"], seed=cfg.seed("data")
        )
        return train_test_split(ds, d["test_per_class"], seed=cfg.seed("split"))
    if d["source"] == "mnist":
        train = load_mnist(d["train_images"], d["train_labels"], d["limit"] or None)
        test = None
        if d["test_images"]:
            test = load_mnist(d["test_images"], d["test_labels"], d["test_limit"] or None)
        return train, test
    ds = load_dataset(d["cache"])
    return train_test_split(ds, d["test_per_class"], seed=cfg.seed("split"))


def load_plan(cfg):
    plan = ClusterPlan.load(cfg["partition"]["plan"])
    problems = validate_plan(plan, cfg["partition"]["label_sets"])
    if problems:
        raise PlanMismatch("; ".join(problems))
    return plan


def node_encoders(state):
    """One encoder per agent; replicas are identical after averaging, so replica 0 stands in."""
    out = {}
    for v, p in state.params.items():
        agent = v[0] if isinstance(v, tuple) else v
        if agent not in out:
            out[agent] = p
    return dict(sorted(out.items()))


def encode(params, X, kind="mcr2"):
    if kind == "dsgd":
        return dsgd_embed(params, X)
    return forward(params, X)


def eval_subset(ds, cap, seed=0):
    """Stratified, label-sorted subset of at most ``cap`` samples for heatmaps."""
    if cap <= 0 or ds.m <= cap:
        return ds.subset(label_order(ds.labels))
    rng = np.random.default_rng(seed)
    per = max(cap // len(ds.classes()), 1)
    idx = np.concatenate([np.sort(rng.permutation(np.flatnonzero(ds.labels == k))[:per]) for k in ds.classes()])
    return ds.subset(idx)


def evaluate(encoders, train, test, eval_cfg, kind="mcr2", own_data=None, seed=0):
    """Geometry report plus classifier accuracy; returns ``(report, eval_set, global Z)``."""
    test = test if test is not None else train
    sub = eval_subset(test, eval_cfg["heatmap_samples"], seed)
    per_node = {node_label(n): encode(p, sub.inputs, kind) for n, p in encoders.items()}
    class_dims = eval_cfg["class_dim"] or None
    report = geometry_report(per_node, sub.labels, class_dims, eval_cfg["tol_orth"], eval_cfg["tol_spec"])
    if own_data is not None:
        # the property suite concerns each node's learned features on its own data
        Zs = [encode(encoders[a], ds.inputs, kind) for a, ds in own_data.items()]
        th = check_theorem1(
            Zs, [ds.labels for ds in own_data.values()], eval_cfg["tol_orth"], eval_cfg["tol_spec"], class_dims
        )
        report.theorem1 = th.to_dict()
    Ztr = global_encoding([encode(p, train.inputs, kind) for p in encoders.values()])
    Zte = global_encoding([encode(p, test.inputs, kind) for p in encoders.values()])
    clf = NearestSubspaceClassifier(energy=eval_cfg["energy"]).fit(Ztr.T, train.labels)
    report.accuracy = float(clf.score(Zte.T, test.labels))
    return report, sub, global_encoding(per_node.values())


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_reports(state, report, eval_set, Z, out):
    """Write every report file into ``out``; returns the list of names written."""
    out = Path(out)
    written = []

    def rows_for(rows):
        return [[r.round, node_label(r.node), fmt(r.rc), fmt(r.r), fmt(r.dual), fmt(r.penalty), fmt(r.total)] for r in rows]

    loss = rows_for(state.initial)
    for rows in state.trajectory:
        loss += rows_for(rows)
    _write_csv(out / "loss.csv", ["round", "node", "rc", "r", "dual", "penalty", "total"], loss)
    written.append("loss.csv")
    _write_csv(out / "consensus.csv", ["round", "max_gap"], [[t, fmt(g)] for t, g in state.consensus])
    written.append("consensus.csv")

    if state.mailbox is not None:
        byte_rows = state.mailbox.byte_log()
    else:
        byte_rows = state.extra.get("param_byte_log", [])
    _write_csv(out / "comm_bytes.csv", ["round", "node", "bytes_sent"], [[r, node_label(n), b] for r, n, b in byte_rows])
    written.append("comm_bytes.csv")

    with open(out / "geometry.json", "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    written.append("geometry.json")

    C = cosine_similarity_matrix(Z)
    _write_csv(out / "cosine.csv", [f"s{i}" for i in range(C.shape[0])], [[fmt(x) for x in row] for row in C])
    write_heatmap_svg(C, out / "cosine.svg")
    written += ["cosine.csv", "cosine.svg"]

    spectra = []
    for key, sv in report.spectra.items():
        spectra += [[key, i, fmt(v)] for i, v in enumerate(sv)]
    _write_csv(out / "spectra.csv", ["series", "index", "sigma"], spectra)
    written.append("spectra.csv")

    if state.cluster_trace:
        write_cluster_trace(state, out / "cluster_trace.csv")
        written.append("cluster_trace.csv")
    return written


def save_checkpoints(state, out):
    ck = Path(out) / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    index = {"kind": state.kind, "nodes": {}}
    names = []
    for node, params in node_encoders(state).items():
        name = f"node_{node_label(node)}.mc2e"
        save_checkpoint(params, ck / name)
        index["nodes"][node_label(node)] = name
        names.append(f"checkpoints/{name}")
    with open(ck / "index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
    return names + ["checkpoints/index.json"]


def load_checkpoints(directory):
    directory = Path(directory)
    with open(directory / "index.json") as f:
        index = json.load(f)
    encoders = {name: load_checkpoint(directory / fn) for name, fn in index["nodes"].items()}
    return encoders, index["kind"]


def train(cfg, parts, plan=None, n_classes=None):
    tc = cfg.train_config()
    n = len(parts)
    strict = cfg["partition"]["strict"]
    if cfg.algorithm == "noniid":
        return run_noniid(parts, plan, tc, check_assumption=strict)
    topo_cfg = cfg["topology"]
    topo = complete_topology(n) if topo_cfg["complete"] else build_topology(n, topo_cfg["p"], cfg.seed("topology"))
    if cfg.algorithm == "dsgd":
        return run_dsgd_baseline(parts, topo, tc, n_classes=n_classes)
    return run_iid(parts, topo, tc, check_assumption=strict)


def _mark_partial(out, written):
    for name in written:
        p = out / name
        if p.exists():
            p.rename(p.with_name(p.name + ".partial"))


def run_experiment(cfg, out=None, stages_hook=None):
    """Run every stage of an experiment and return its RunManifest.

    The trained state and geometry report ride along as ``manifest.state``
    and ``manifest.report``. Raises StageError after recording the failure
    when any stage fails. ``stages_hook(name)`` runs just before each stage
    body, so a hook that raises fails that stage.
    """
    out = Path(out or cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash=cfg.hash(), started=_now())
    written = []

    def stage(name, fn):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            if stages_hook is not None:
                stages_hook(name)
            result = fn()
        except Exception as exc:
            manifest.durations[name] = time.perf_counter() - t0
            manifest.status = "failed"
            manifest.failed_stage = name
            manifest.error = f"{type(exc).__name__}: {exc}"
            manifest.ended = _now()
            _mark_partial(out, written)
            manifest.files = [w + ".partial" for w in written if (out / (w + ".partial")).exists()]
            manifest.write(out)
            raise StageError(name, exc) from exc
        manifest.durations[name] = time.perf_counter() - t0
        return result

    def data_stage():
        tr, te = load_data(cfg)
        save_dataset(tr, out / "train.mc2d")
        written.append("train.mc2d")
        if te is not None:
            save_dataset(te, out / "test.mc2d")
            written.append("test.mc2d")
        return tr, te

    train_set, test_set = stage("data", data_stage)
    n_classes = len(train_set.classes())
    part_cfg = cfg["partition"]
    spec = PartitionSpec(part_cfg["mode"], part_cfg["n_nodes"], part_cfg["label_sets"] or None, cfg.seed("partition"))
    parts = stage("partition", lambda: partition(train_set, spec))
    plan = None
    if cfg.algorithm == "noniid":
        plan = stage("plan", lambda: load_plan(cfg))
        with open(out / "plan.json", "w") as f:
            json.dump(plan.to_json(), f, indent=2, sort_keys=True)
        written.append("plan.json")

    def enforce_stage():
        if not part_cfg["enforce"]:
            return parts, {}
        mode = "noniid" if cfg.algorithm == "noniid" else "iid"
        if mode == "iid" and part_cfg["mode"] == "by-labels":
            return parts, {}
        try:
            return enforce_proportions(parts, mode, plan, n_classes, cfg.seed("enforce"))
        except AssumptionViolated as exc:
            if part_cfg["strict"]:
                raise
            # some replicated plans admit no exact equalization by duplication
            log.warning("proportion assumption not met, continuing: %s", exc)
            return parts, {}

    parts, _ = stage("enforce", enforce_stage)
    state = stage("train", lambda: train(cfg, parts, plan, n_classes))
    written += stage("checkpoints", lambda: save_checkpoints(state, out))

    def eval_stage():
        encoders = node_encoders(state)
        own = {a: parts[a] for a in encoders}
        return evaluate(encoders, train_set, test_set, cfg["eval"], state.kind, own, cfg.seed("eval"))

    report, eval_set, Z = stage("eval", eval_stage)
    written += stage("reports", lambda: emit_reports(state, report, eval_set, Z, out))
    manifest.status = "ok"
    manifest.ended = _now()
    manifest.files = written + ["manifest.json"]
    manifest.write(out)
    manifest.state, manifest.report = state, report
    return manifest
