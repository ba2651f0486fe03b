#!/usr/bin/env python3
"""Validates bundled configs and live CLI output against the JSON schemas in docs/."""

import argparse
import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

from jsonschema import Draft202012Validator

CSV_COLUMNS = [
    "mode", "rate_bytes_per_sec", "total_wall", "cpu_time", "cpu_ratio", "client_cpu_ratio",
    "basket_fetch", "decompress", "deserialize", "select", "write", "result_transfer",
    "client_link_bytes", "storage_link_bytes", "requests", "n_input", "n_passed", "output_bytes",
    "request_bytes", "output_sha256", "cache_hit_rate", "speedup",
]

failures = []


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    if not cond:
        failures.append(what)


def load(path):
    with open(path) as f:
        return json.load(f)


def validator(docs, name):
    schema = load(docs / name)
    Draft202012Validator.check_schema(schema)
    return Draft202012Validator(schema)


def valid(v, doc, what):
    errors = list(v.iter_errors(doc))
    check(not errors, what + ("" if not errors else ": " + errors[0].message))


def run(cmd, **kw):
    return subprocess.run([str(c) for c in cmd], capture_output=True, text=True, **kw)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--docs", type=Path, required=True)
    ap.add_argument("--config", type=Path, required=True)
    ap.add_argument("--cli", type=Path, required=True)
    ap.add_argument("--work", type=Path, required=True)
    args = ap.parse_args()

    query_v = validator(args.docs, "query.schema.json")
    sets_v = validator(args.docs, "minimal_sets.schema.json")
    spec_v = validator(args.docs, "gen_spec.schema.json")
    report_v = validator(args.docs, "report.schema.json")

    valid(query_v, load(args.config / "reference_query.json"), "config/reference_query.json")
    valid(sets_v, load(args.config / "minimal_sets.json"), "config/minimal_sets.json")
    valid(spec_v, load(args.config / "gen_spec.json"), "config/gen_spec.json")

    bad_queries = [
        {"output": "o"},
        {"input": "i", "output": "o", "branches": ["a*b"]},
        {"input": "i", "output": "o", "extra": 1},
        {"input": "i", "output": "o", "object_selections": [{"collection": "Jet"}]},
        {"input": "i", "output": "o", "output_codec": "zstd"},
    ]
    for q in bad_queries:
        check(not query_v.is_valid(q), "schema rejects " + json.dumps(q))
    check(not sets_v.is_valid({"HLT": ["HLT_A"]}), "schema rejects a non-wildcard minimal-set key")

    shutil.rmtree(args.work, ignore_errors=True)
    args.work.mkdir(parents=True)
    data = args.work / "data"
    data.mkdir()
    spec = load(args.config / "gen_spec.json")
    spec["n_events"] = 4000
    spec["target_efficiency"] = 0.05
    (args.work / "spec.json").write_text(json.dumps(spec))
    r = run([args.cli, "gen", "--spec", args.work / "spec.json", "--out", data / "events.skim", "--reference"])
    check(r.returncode == 0, "skimlite gen --reference" + ("" if r.returncode == 0 else ": " + r.stderr))
    if r.returncode != 0:
        return 1
    valid(query_v, load(data / "query.json"), "generated query.json")
    valid(sets_v, load(data / "minimal_sets.json"), "generated minimal_sets.json")

    r = run([args.cli, "inspect", data / "events.skim"])
    header = json.loads(r.stdout) if r.returncode == 0 else {}
    check(header.get("n_events") == 4000, "inspect reports 4000 events")

    report = args.work / "report"
    r = run([args.cli, "bench", "--query", data / "query.json", "--minimal-sets", data / "minimal_sets.json",
             "--modes", "all", "--rate", "50000000,20000000", "--latency-us", "0", "--report", report])
    check(r.returncode == 0, "skimlite bench" + ("" if r.returncode == 0 else ": " + r.stderr))
    if r.returncode != 0:
        return 1
    doc = load(report / "report.json")
    valid(report_v, doc, "report.json")
    rows = doc["rows"]
    check(len(rows) == 8, "one row per mode and rate")
    check(len({row["n_passed"] for row in rows}) == 1, "n_passed identical across modes")
    check(len({row["output_sha256"] for row in rows}) == 1, "output identical across modes")

    with open(report / "report.csv", newline="") as f:
        table = list(csv.reader(f))
    check(table[0] == CSV_COLUMNS, "report.csv columns")
    check(len(table) == 9 and all(len(t) == len(CSV_COLUMNS) for t in table[1:]), "report.csv rows")
    check(sorted(t[0] for t in table[1:]) == sorted(row["mode"] for row in rows), "report.csv matches report.json")
    check((report / "report.txt").read_text().count("\n") == 9, "report.txt has a header and 8 rows")

    bad = args.work / "bad_query.json"
    bad.write_text(json.dumps({"input": "events.skim", "output": "o.skim", "preselection": "MET_pt >"}))
    r = run([args.cli, "skim", "--query", bad, "--storage", data])
    check(r.returncode != 0 and "position" in r.stderr, "skim reports a malformed expression with its position")

    print(f"{len(failures)} failure(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
