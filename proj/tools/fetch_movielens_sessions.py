#!/usr/bin/env python3
"""Build a session log from MovieLens-100k for the real-data check.

The ratings file ships inside the `recbole` wheel, so this downloads that wheel
with pip, reads ml-100k.inter from it, splits each user's history into
sessions at gaps longer than --gap-minutes, and writes a TSV with columns
session_id, item_id, timestamp that `miasrec preprocess` reads directly.
"""

import argparse
import csv
import io
import random
import subprocess
import sys
import tempfile
import zipfile
from collections import defaultdict
from pathlib import Path

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def read_interactions(wheel_dir: Path):
    wheels = sorted(wheel_dir.glob("recbole-*.whl"))
    if not wheels:
        sys.exit("pip did not produce a recbole wheel")
    with zipfile.ZipFile(wheels[-1]) as archive:
        text = archive.read(MEMBER).decode("utf-8")
    reader = csv.reader(io.StringIO(text), delimiter="\t")
    header = next(reader)
    user, item, stamp = (header.index(f"{name}") for name in ("user_id:token", "item_id:token", "timestamp:float"))
    for row in reader:
        yield row[user], row[item], int(float(row[stamp]))


def sessionize(events, gap_seconds):
    by_user = defaultdict(list)
    for user, item, stamp in events:
        by_user[user].append((stamp, item))
    sessions = []
    for user in sorted(by_user, key=int):
        history = sorted(by_user[user])
        current = [history[0]]
        for previous, event in zip(history, history[1:]):
            if event[0] - previous[0] > gap_seconds:
                sessions.append((user, current))
                current = []
            current.append(event)
        sessions.append((user, current))
    return sessions


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data" / "ml100k-sessions.tsv")
    parser.add_argument("--gap-minutes", type=float, default=30.0)
    parser.add_argument("--max-sessions", type=int, default=20000)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:", "-q", "-d", tmp,
                        "recbole"], check=True)
        events = list(read_interactions(Path(tmp)))

    sessions = [s for s in sessionize(events, args.gap_minutes * 60) if len(s[1]) >= 2]
    if len(sessions) > args.max_sessions:
        keep = sorted(random.Random(args.seed).sample(range(len(sessions)), args.max_sessions))
        sessions = [sessions[i] for i in keep]

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(["session_id", "item_id", "timestamp"])
        for index, (user, events_in_session) in enumerate(sessions):
            for stamp, item in events_in_session:
                writer.writerow([f"u{user}-{index}", item, stamp])
    total = sum(len(s[1]) for s in sessions)
    print(f"{len(sessions)} sessions, {total} events from {len(events)} ratings -> {args.out}")


if __name__ == "__main__":
    main()
