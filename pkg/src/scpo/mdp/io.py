"""Text format for finite MDPs and CSV output of solver results.

Grammar (one directive per line, ``#`` starts a comment)::

    states N actions M gamma G dim D
    embed s x1 .. xD        # exactly one per state
    r s a value             # omitted entries are 0
    p s a s' prob           # omitted entries are 0

The header must come first.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from scpo.mdp.model import FiniteMdp


class MdpParseError(ValueError):
    def __init__(self, lineno: int, line: str, message: str):
        super().__init__(f"line {lineno}: {message}: {line.strip()!r}")
        self.lineno = lineno
        self.line = line


def _index(tok: str, bound: int, what: str) -> int:
    i = int(tok)
    if not 0 <= i < bound:
        raise ValueError(f"{what} index {i} out of range [0, {bound})")
    return i


def parse_mdp(text: str) -> FiniteMdp:
    header = None
    emb = p = r = None
    seen_embed: set[int] = set()
    first_p_line: dict[tuple[int, int], tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if header is None:
                if len(tok) != 8 or tok[0::2] != ["states", "actions", "gamma", "dim"]:
                    raise ValueError("expected header 'states N actions M gamma G dim D'")
                n_s, n_a, gamma, dim = int(tok[1]), int(tok[3]), float(tok[5]), int(tok[7])
                if n_s < 1 or n_a < 1 or dim < 1:
                    raise ValueError("sizes must be positive")
                header = (n_s, n_a, gamma, dim)
                emb = np.full((n_s, dim), np.nan)
                p = np.zeros((n_s, n_a, n_s))
                r = np.zeros((n_s, n_a))
                continue
            n_s, n_a, _, dim = header
            kind = tok[0]
            if kind == "embed":
                if len(tok) != 2 + dim:
                    raise ValueError(f"embed needs a state and {dim} coordinates")
                s = _index(tok[1], n_s, "state")
                if s in seen_embed:
                    raise ValueError(f"duplicate embedding for state {s}")
                seen_embed.add(s)
                emb[s] = [float(x) for x in tok[2:]]
            elif kind == "r":
                if len(tok) != 4:
                    raise ValueError("reward line needs 's a value'")
                r[_index(tok[1], n_s, "state"), _index(tok[2], n_a, "action")] = float(tok[3])
            elif kind == "p":
                if len(tok) != 5:
                    raise ValueError("transition line needs 's a s_next prob'")
                s, a = _index(tok[1], n_s, "state"), _index(tok[2], n_a, "action")
                t = _index(tok[3], n_s, "state")
                prob = float(tok[4])
                if not 0.0 <= prob <= 1.0:
                    raise ValueError(f"probability {prob} outside [0, 1]")
                p[s, a, t] = prob
                first_p_line.setdefault((s, a), (lineno, raw))
            else:
                raise ValueError(f"unknown directive {kind!r}")
        except ValueError as exc:
            raise MdpParseError(lineno, raw, str(exc)) from None
    if header is None:
        raise MdpParseError(0, "", "missing header")
    missing = sorted(set(range(header[0])) - seen_embed)
    if missing:
        raise MdpParseError(0, "", f"missing embedding for states {missing}")
    sums = p.sum(axis=2)
    for (s, a), total in np.ndenumerate(sums):
        if abs(total - 1.0) > 1e-12:
            lineno, raw = first_p_line.get((s, a), (0, ""))
            raise MdpParseError(lineno, raw, f"transitions of (s={s}, a={a}) sum to {float(total)!r}")
    try:
        return FiniteMdp(p, r, header[2], emb)
    except ValueError as exc:
        raise MdpParseError(0, "", str(exc)) from None


def load_mdp(path) -> FiniteMdp:
    return parse_mdp(Path(path).read_text())


def format_mdp(mdp: FiniteMdp) -> str:
    lines = [f"states {mdp.n_states} actions {mdp.n_actions} gamma {mdp.gamma!r} dim {mdp.dim}"]
    for s in range(mdp.n_states):
        lines.append("embed %d %s" % (s, " ".join(repr(float(x)) for x in mdp.embedding[s])))
    for (s, a), val in np.ndenumerate(mdp.reward):
        if val != 0.0:
            lines.append(f"r {s} {a} {float(val)!r}")
    for (s, a, t), prob in np.ndenumerate(mdp.transition):
        if prob != 0.0:
            lines.append(f"p {s} {a} {t} {float(prob)!r}")
    return "\n".join(lines) + "\n"


def _write_table(path, header: str, table: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "action", header])
        for (s, a), val in np.ndenumerate(table):
            w.writerow([s, a, repr(float(val))])


def write_values_csv(path, q: np.ndarray) -> None:
    _write_table(path, "value", q)


def write_policy_csv(path, policy: np.ndarray) -> None:
    _write_table(path, "prob", policy)


def read_table_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    n_s = max(int(row[0]) for row in rows) + 1
    n_a = max(int(row[1]) for row in rows) + 1
    out = np.zeros((n_s, n_a))
    for s, a, val in rows:
        out[int(s), int(a)] = float(val)
    return out
