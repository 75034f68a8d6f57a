"""Run reports: one dict per command, rendered to text from the dict.

Every hook renders the human text from the machine-readable payload and
nothing else, so the JSON form always contains every number a user sees.
The payload layout per command is documented in
src/attnforge/schemas/report.schema.json.
"""

from __future__ import annotations

import json

SCHEMA_TAG = "attnforge-report/1"


def envelope(command: str, ok: bool, exit_code: int, seconds: float,
             **payload) -> dict:
    doc = {"schema": SCHEMA_TAG, "command": command, "ok": ok,
           "exit_code": exit_code, "seconds": round(seconds, 6)}
    doc.update(payload)
    return doc


def error_report(command: str, exit_code: int, kind: str, message: str,
                 context: dict) -> dict:
    return envelope(command, False, exit_code, 0.0,
                    error={"kind": kind, "message": message,
                           "context": {k: _plain(v) for k, v in
                                       sorted(context.items())}})


def _plain(v):
    if isinstance(v, (str, int, float, bool)) or v is None:
        return v
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    return repr(v)


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=False) + "\n"


# ─────────────────────────── human rendering ───────────────────────────


def _dims_line(dims: dict) -> str:
    return (f"dqk={dims['dqk']} dv={dims['dv']}  batch={dims['batch']} "
            f"heads={dims['heads']} seq_q={dims['seq_q']} "
            f"seq_k={dims['seq_k']}")


def render(report: dict) -> str:
    """Plain-text form of a report dict."""
    if "error" in report:
        err = report["error"]
        lines = [f"error[{err['kind']}]: {err['message']}"]
        for k, v in err.get("context", {}).items():
            lines.append(f"  {k} = {v}")
        return "\n".join(lines) + "\n"
    fn = _RENDERERS[report["command"]]
    body = fn(report)
    status = "ok" if report["ok"] else "FAIL"
    body.append(f"{report['command']}: {status} "
                f"(exit {report['exit_code']}, {report['seconds']}s)")
    return "\n".join(body) + "\n"


def _render_list(r: dict) -> list[str]:
    lines = []
    for b in r["builtins"]:
        d = b["dims"]
        lines.append(f"{b['name']}  {b['pattern']}  dqk={d['dqk']} "
                     f"dv={d['dv']}  heads={d['heads']} "
                     f"seq_q={d['seq_q']} seq_k={d['seq_k']} "
                     f"batch={d['batch']}")
    lines.append(f"{len(r['builtins'])} builtin variants")
    return lines


def _render_check(r: dict) -> list[str]:
    v = r["variant"]
    lines = [f"check {v['name']} ({v['pattern']})  {_dims_line(v['dims'])}",
             f"seed={r['seed']} scale={r['scale']}"]
    for c in r["comparisons"]:
        cfg = " ".join(f"{k}={c[k]}" for k in sorted(c)
                       if k not in ("name", "max_abs_err", "tolerance",
                                    "pass"))
        verdict = "pass" if c["pass"] else "FAIL"
        lines.append(f"  {c['name']}  {cfg}  max_abs_err={c['max_abs_err']:.3e}"
                     f" tol={c['tolerance']:.0e}  {verdict}")
    return lines


def _render_gradcheck(r: dict) -> list[str]:
    v = r["variant"]
    lines = [f"gradcheck {v['name']} ({v['pattern']})  "
             f"{_dims_line(v['dims'])}",
             f"seed={r['seed']} scale={r['scale']} eps={r['eps']}"]
    for t in r["tensors"]:
        verdict = "pass" if t["pass"] else "FAIL"
        worst = "" if t["worst_coord"] is None else \
            f" worst={tuple(t['worst_coord'])}"
        lines.append(f"  {t['tensor']}: checked={t['checked']} "
                     f"resampled={t['resampled']} "
                     f"max_rel_err={t['max_rel_err']:.3e} "
                     f"tol={t['tolerance']:.0e}{worst}  {verdict}")
    return lines


def _render_schedule(r: dict) -> list[str]:
    v = r["variant"]
    p = r["plan"]
    lines = [f"schedule {v['name']} on {r['device']}  mode={r['mode']}",
             f"  tile {p['tile']['m']}x{p['tile']['n']}  "
             f"cost={p['cost']:.6e}"]
    for name in sorted(p["placements"]):
        lines.append(f"    {name}: {p['placements'][name]} "
                     f"stages={p['stages'][name]}")
    bd = r.get("breakdown")
    if bd:
        lines.append(f"  traffic_time={bd['traffic_time']:.6e} "
                     f"compute_time={bd['compute_time']:.6e} "
                     f"overlap_credit={bd['overlap_credit']:.6e} "
                     f"pipeline_depth={bd['pipeline_depth']}")
    ver = r.get("verify")
    if ver and ver.get("skipped"):
        lines.append(f"  brute force: skipped, space={ver['space']} "
                     f"exceeds limit={ver['limit']}")
    elif ver:
        verdict = "equal" if ver["equal"] else "DIFFER"
        lines.append(f"  brute force: space={ver['space']} "
                     f"cost={ver['brute_cost']:.6e}  {verdict}")
    return lines


def _render_emit(r: dict) -> list[str]:
    lines = [f"emit {r['variant']['name']} on {r['device']}  "
             f"tile {r['tile']['m']}x{r['tile']['n']} "
             f"cost={r['cost']:.6e}",
             f"  {r['bytes']} bytes sha256={r['sha256']}"]
    if r.get("path"):
        lines.append(f"  wrote {r['path']}")
    chk = r.get("check")
    if chk:
        verdict = "pass" if chk["pass"] else "FAIL"
        lines.append(f"  oracle max_abs_err={chk['max_abs_err']:.3e} "
                     f"tol={chk['tolerance']:.0e}  {verdict}")
    return lines


def _render_bench(r: dict) -> list[str]:
    lines = [f"bench seed={r['seed']} scale={r['scale']} "
             f"repeats={r['repeats']}"]
    for row in r["rows"]:
        cfg = " ".join(f"{k}={v}" for k, v in sorted(row["config"].items()))
        lines.append(f"  {row['variant']}  {cfg}  "
                     f"seq={row['seq_q']}x{row['seq_k']}  "
                     f"naive={row['naive_seconds']:.6f}s "
                     f"{row['candidate']}={row['candidate_seconds']:.6f}s "
                     f"ratio={row['ratio']:.3f}")
    return lines


_RENDERERS = {
    "list": _render_list,
    "check": _render_check,
    "gradcheck": _render_gradcheck,
    "schedule": _render_schedule,
    "emit": _render_emit,
    "bench": _render_bench,
}
