"""Experiment DAG: each node is a zero-argument function run in a forked child.

`NODES = {fn: [deps]}` dicts from src/nodes/*.py are merged into one DAG.
Progress goes to LOG_DIR/run.json after every node, and a later invocation
with the same node graph picks up where the previous one stopped, so a
sweep of training runs never retrains a finished config.

Env vars read by DAG.run:
    DAG_TARGET           comma-separated node names, modules or ids
    DAG_ON_FAILURE       "crash" (stop submitting) or "continue"
    DAG_PARALLELISM      concurrent children, default 1
    DAG_DRAIN_TIMEOUT_S  grace period for children after SIGTERM, default 8
"""

import graphlib
import hashlib
import importlib.util
import json
import multiprocessing
import multiprocessing.connection
import os
import signal
import sys
import tempfile
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from . import tracking

_FORK = multiprocessing.get_context("fork")

Node = Callable[[], object]


def task_id(fn: Node) -> str:
    module = fn.__module__.removeprefix("src.")
    return f"{module}.{fn.__name__}"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _graph_hash(nodes: dict[Node, list[Node]]) -> str:
    edges = sorted((task_id(fn), sorted(task_id(d) for d in deps)) for fn, deps in nodes.items())
    return hashlib.md5(json.dumps(edges).encode()).hexdigest()[:16]


def _write_json_atomic(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(data, f, indent=2)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _read_run_state(log_dir: Path) -> dict | None:
    try:
        return json.loads((log_dir / "run.json").read_text())
    except (OSError, json.JSONDecodeError):
        return None


def _failed(node_id: str, error: str, started_at: str | None = None) -> dict:
    now = _utc_now()
    return {
        "task_id": node_id, "status": "failed", "error": error, "traceback": "",
        "started_at": started_at or now, "finished_at": now, "duration_s": 0.0, "artifacts": [],
    }


def _run_child(fn: Node, node_id: str, conn) -> None:
    signal.signal(signal.SIGTERM, signal.SIG_DFL)
    signal.signal(signal.SIGINT, signal.SIG_DFL)
    tracking.clear_tracking()
    tracking.set_current_task(node_id)

    clock = time.monotonic()
    result = {"task_id": node_id, "started_at": _utc_now(), "status": "failed"}
    try:
        fn()
        result["status"] = "done"
    except BaseException as e:  # noqa: BLE001
        result["error"] = str(e) or type(e).__name__
        result["traceback"] = traceback.format_exc()
    result.update(finished_at=_utc_now(), duration_s=time.monotonic() - clock, artifacts=tracking.snapshot())
    sys.stdout.flush()
    sys.stderr.flush()
    try:
        conn.send(result)
    except Exception as e:  # unpicklable error payloads
        conn.send(_failed(node_id, f"result could not be sent: {e}", result["started_at"]))
    finally:
        conn.close()


def _exit_reason(code: int | None) -> str:
    if code is not None and code < 0:
        try:
            return f"killed by {signal.Signals(-code).name} (exitcode={code})"
        except ValueError:
            return f"killed by signal {-code}"
    return f"child exited with code {code} before sending a result"


class _Scheduler:
    """Bookkeeping for one DAG.run: what is in flight and whether to go on."""

    def __init__(self, dag: "DAG", order: list[Node], parallelism: int, keep_going: bool):
        self.dag = dag
        self.order = order
        self.parallelism = parallelism
        self.keep_going = keep_going
        self.in_flight: dict = {}
        self.stopped = False
        self.first_failure: dict | None = None

    def _ready(self) -> list[Node]:
        state = self.dag.state
        ready = []
        for fn in self.order:
            node = state[task_id(fn)]
            if node["status"] != "pending":
                continue
            upstream = [state[task_id(d)]["status"] for d in self.dag.nodes[fn]]
            if "failed" in upstream or "skipped" in upstream:
                node.update(status="skipped", error="Upstream dependency did not complete")
            elif all(s == "done" for s in upstream):
                ready.append(fn)
        return ready

    def submit(self) -> None:
        if self.stopped:
            return
        for fn in self._ready():
            if len(self.in_flight) >= self.parallelism:
                break
            node_id = task_id(fn)
            self.dag.state[node_id].update(status="running", started_at=_utc_now())
            print(f"[DAG] Running {node_id}...")
            recv, send = _FORK.Pipe(duplex=False)
            proc = _FORK.Process(target=_run_child, args=(fn, node_id, send), name=f"node:{node_id}")
            proc.start()
            send.close()
            self.in_flight[proc] = (node_id, recv)

    def _collect(self, proc) -> tuple[str, dict]:
        node_id, recv = self.in_flight.pop(proc)
        proc.join()
        result = None
        try:
            if recv.poll():
                result = recv.recv()
        except (EOFError, OSError):
            result = None
        finally:
            recv.close()
        if result is None:
            result = _failed(node_id, _exit_reason(proc.exitcode), self.dag.state[node_id].get("started_at"))
        return node_id, result

    def reap(self, timeout: float) -> None:
        finished = multiprocessing.connection.wait([p.sentinel for p in self.in_flight], timeout=timeout)
        for proc in [p for p in self.in_flight if p.sentinel in finished]:
            node_id, result = self._collect(proc)
            self.dag.record(node_id, result)
            if result["status"] == "done":
                print(f"[DAG] {node_id} done ({result.get('duration_s') or 0.0:.1f}s)")
                for path in tracking.writes_by_task(node_id):
                    print(f"  -> Saved {path}")
            else:
                print(f"[DAG] {node_id} failed: {result.get('error', 'unknown')}")
                self.first_failure = self.first_failure or result
                if not self.keep_going:
                    self.stopped = True

    def drain(self, grace: float) -> None:
        deadline = time.monotonic() + grace
        while self.in_flight and time.monotonic() < deadline:
            self.reap(max(0.0, deadline - time.monotonic()))
        for proc in list(self.in_flight):
            node_id, recv = self.in_flight.pop(proc)
            print(f"[DAG] {node_id}: terminating child...")
            proc.terminate()
            proc.join(timeout=5)
            if proc.is_alive():
                proc.kill()
                proc.join(timeout=2)
            recv.close()
            failure = _failed(node_id, "killed during shutdown", self.dag.state[node_id].get("started_at"))
            self.dag.record(node_id, failure)
            self.first_failure = self.first_failure or failure


class DAG:
    def __init__(self, nodes: dict[Node, list[Node]]):
        self.nodes = nodes
        self.topology_hash = _graph_hash(nodes)
        self.state: dict[str, dict] = {
            task_id(fn): {
                "id": task_id(fn),
                "deps": [task_id(d) for d in deps],
                "status": "pending",
                "started_at": None,
                "finished_at": None,
                "duration_s": None,
                "error": None,
                "writes": [],
                "reads": [],
            }
            for fn, deps in nodes.items()
        }
        log_dir = os.environ.get("LOG_DIR")
        prior = _read_run_state(Path(log_dir)) if log_dir else None
        if prior is not None:
            self._resume(prior)

    def _resume(self, prior: dict) -> None:
        """Carry over nodes a previous run finished, unless the graph changed."""
        if prior.get("topology_hash") not in (None, self.topology_hash):
            print(f"[DAG] Node graph changed ({prior['topology_hash']} -> {self.topology_hash}); starting fresh")
            return
        carried = 0
        for node in prior.get("dag", {}).get("nodes", []):
            if node.get("status") == "done" and node.get("id") in self.state:
                self.state[node["id"]] = {**self.state[node["id"]], **node, "resumed": True}
                carried += 1
        if carried:
            print(f"[DAG] Resumed from prior invocation: {carried} nodes already done")

    def _order(self) -> list[Node]:
        sorter = graphlib.TopologicalSorter({fn: set(deps) for fn, deps in self.nodes.items()})
        try:
            return list(sorter.static_order())
        except graphlib.CycleError as e:
            raise ValueError(f"Cycle detected in DAG: {[task_id(fn) for fn in e.args[1]]}") from None

    def _restrict(self, order: list[Node], targets: list[str]) -> list[Node]:
        """Keep nodes named by id, module or function; mark the rest skipped."""
        wanted = set(targets)
        kept = [fn for fn in order if wanted & {task_id(fn), fn.__name__, task_id(fn).split(".")[-2]}]
        kept_ids = {task_id(fn) for fn in kept}
        for node_id, node in self.state.items():
            if node_id not in kept_ids and node["status"] == "pending":
                node.update(status="skipped", error="Not in DAG_TARGET")
        return kept

    def record(self, node_id: str, result: dict) -> None:
        node = self.state[node_id]
        node.update(
            status=result["status"],
            started_at=result.get("started_at"),
            finished_at=result.get("finished_at"),
            duration_s=result.get("duration_s"),
        )
        if result["status"] == "failed":
            node.update(error=result.get("error", "unknown"), traceback=result.get("traceback", ""))
        tracking.merge(result.get("artifacts", []))
        self.save_state()

    def run(self, targets: list[str] | None = None) -> "DAG":
        """Run every pending node after its dependencies; raise on the first failure."""
        tracking.clear_tracking()
        try:
            parallelism = max(1, int(os.environ.get("DAG_PARALLELISM", "1")))
        except ValueError:
            parallelism = 1
        if os.environ.get("DAG_TARGET"):
            targets = [t.strip() for t in os.environ["DAG_TARGET"].split(",") if t.strip()]

        order = self._order()
        if targets:
            order = self._restrict(order, targets)
            if not order:
                print(f"[DAG] No nodes matched targets: {targets}")
                print(f"[DAG] Available: {sorted(self.state)}")
                self.save_state()
                return self
        for fn in order:
            if self.state[task_id(fn)]["status"] == "done":
                print(f"[DAG] {task_id(fn)} resumed (done in prior invocation)")

        scheduler = _Scheduler(self, order, parallelism, os.environ.get("DAG_ON_FAILURE", "crash") == "continue")
        interrupted = False

        def on_sigterm(signum, frame):
            nonlocal interrupted
            print("[DAG] Received SIGTERM, draining in-flight nodes...")
            interrupted = scheduler.stopped = True

        previous = signal.getsignal(signal.SIGTERM)
        try:
            signal.signal(signal.SIGTERM, on_sigterm)
        except ValueError:
            previous = None  # not the main thread
        try:
            scheduler.submit()
            while scheduler.in_flight and not interrupted:
                scheduler.reap(timeout=1.0)
                scheduler.submit()
            if scheduler.in_flight:
                scheduler.drain(float(os.environ.get("DAG_DRAIN_TIMEOUT_S", "8")))
        finally:
            if previous is not None:
                signal.signal(signal.SIGTERM, previous)

        self.save_state()
        failure = scheduler.first_failure
        if failure is not None:
            raise RuntimeError(f"[DAG] {failure['task_id']} failed: {failure.get('error', 'unknown')}")
        return self

    def _status(self) -> str:
        statuses = {n["status"] for n in self.state.values()}
        if "failed" in statuses:
            return "failed"
        return "done" if statuses <= {"done", "skipped"} else "running"

    def to_json(self) -> dict:
        nodes = [
            {
                **node,
                "writes": tracking.writes_by_task(node["id"]) or node.get("writes", []),
                "reads": tracking.reads_by_task(node["id"]) or node.get("reads", []),
            }
            for node in self.state.values()
        ]
        return {
            "run_id": os.environ.get("RUN_ID", "unknown"),
            "status": self._status(),
            "topology_hash": self.topology_hash,
            "started_at": min((n["started_at"] for n in nodes if n.get("started_at")), default=None),
            "finished_at": max((n["finished_at"] for n in nodes if n.get("finished_at")), default=None),
            "dag": {
                "nodes": nodes,
                "edges": [{"from": task_id(d), "to": task_id(fn)} for fn, deps in self.nodes.items() for d in deps],
                "total_duration_s": sum(n.get("duration_s") or 0 for n in nodes),
            },
        }

    def save_state(self) -> None:
        """LOG_DIR/run.json; nothing is written without LOG_DIR."""
        log_dir = os.environ.get("LOG_DIR")
        if log_dir:
            _write_json_atomic(Path(log_dir) / "run.json", self.to_json())


def load_nodes(nodes_dir: Path | str | None = None) -> DAG:
    """DAG over the NODES dicts of every public module in `nodes_dir` (default src/nodes)."""
    nodes_dir = Path(nodes_dir) if nodes_dir is not None else Path.cwd() / "src" / "nodes"
    print(f"[DAG] Loading nodes from: {nodes_dir}")
    merged: dict[Node, list[Node]] = {}
    if not nodes_dir.exists():
        print(f"[DAG] Warning: nodes directory not found: {nodes_dir}")
        return DAG(merged)

    for path in sorted(nodes_dir.glob("*.py")):
        if path.name.startswith("_"):
            continue
        name = f"nodes.{path.stem}"
        module = sys.modules.get(name)
        if module is None:
            spec = importlib.util.spec_from_file_location(name, path)
            if spec is None or spec.loader is None:
                print(f"[DAG] Warning: could not load spec for {path}")
                continue
            module = importlib.util.module_from_spec(spec)
            sys.modules[name] = module
            try:
                spec.loader.exec_module(module)
            except Exception as e:
                del sys.modules[name]
                print(f"[DAG] Error loading {path.name}: {e}")
                raise
        if isinstance(getattr(module, "NODES", None), dict):
            merged.update(module.NODES)

    print(f"[DAG] Loaded {len(merged)} nodes")
    return DAG(merged)
