"""Atomic file output, provenance headers, checkpoints and report CSVs."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .attention import GateProjection, LayerKind, LayerParams, attention_profiles, attention_scores_parallel
from .distill.chain import HISTORY_COLUMNS
from .distill.toy import LayerBank, ToyModel
from .errors import ConfigError

CHECKPOINT_FORMAT = "dsla-checkpoint-v1"
PROFILE_COLUMNS = ("layer", "head", "token_index", "kind", "score", "gla", "history", "recency", "gamma")


def atomic_write(path, data) -> Path:
    """Write ``data`` (str or bytes) to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def header_lines(provenance: Mapping) -> str:
    """``# key: value`` lines placed above CSV bodies."""
    return "".join(f"# {k}: {v}\n" for k, v in provenance.items())


def read_csv(path_or_text) -> tuple[dict, list[dict]]:
    """Parse a CSV written here: returns ``(provenance, rows)``."""
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text(encoding="utf-8")
    prov, body = {}, []
    for line in text.splitlines(keepends=True):
        if line.startswith("# "):
            k, _, v = line[2:].rstrip("\n").partition(": ")
            prov[k] = v
        else:
            body.append(line)
    return prov, list(csv.DictReader(body))


def csv_text(columns: Sequence[str], rows: Iterable[Sequence], provenance: Optional[Mapping] = None) -> str:
    buf = io.StringIO()
    if provenance:
        buf.write(header_lines(provenance))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def history_csv(history: Sequence[Mapping], provenance: Optional[Mapping] = None) -> str:
    """Training curve with columns ``step, l_dist, l_cont, total, lr``."""
    return csv_text(HISTORY_COLUMNS, ([h[c] for c in HISTORY_COLUMNS] for h in history), provenance)


def _layer_arrays(prefix: str, p: LayerParams) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": np.asarray(v) for k, v in p.arrays().items()}


def _layer_from(arrays: Mapping[str, np.ndarray], prefix: str, kind: LayerKind, heads: int, gamma: float):
    def get(name):
        return np.asarray(arrays[f"{prefix}/{name}"], dtype=np.float64)

    def gate(tag):
        return GateProjection(*(get(f"{tag}.{n}") for n in ("A_alpha", "b_alpha", "A_beta", "b_beta")))

    return LayerParams(
        kind,
        get("W_q"),
        get("W_k"),
        get("W_v"),
        get("W_o"),
        heads=heads,
        gate1=gate("gate1") if kind is not LayerKind.TEACHER else None,
        gate2=gate("gate2") if kind is LayerKind.DSLA else None,
        gamma=gamma,
    )


@dataclass
class Checkpoint:
    """A saved layer bank plus how many conversions the stage committed."""

    bank: LayerBank
    conversions: int
    provenance: dict

    @property
    def conversion_mask(self) -> list[bool]:
        return self.bank.mask(self.conversions)

    def model(self, k: Optional[int] = None) -> ToyModel:
        return self.bank.model(self.conversions if k is None else k)


def save_checkpoint(path, bank: LayerBank, conversions: int, provenance: Optional[Mapping] = None) -> Path:
    """Store every teacher and substitute layer of ``bank`` in one ``.npz``.

    A JSON header records the format, order, conversion mask, per-layer kinds,
    heads and gammas, and any provenance fields (config hash, seed, ...).
    """
    if conversions > bank.max_conversions:
        raise ConfigError(f"bank holds only {bank.max_conversions} conversions")
    arrays: dict[str, np.ndarray] = {}
    for i, p in enumerate(bank.teacher):
        arrays.update(_layer_arrays(f"teacher/{i}", p))
    subs = {}
    for i, p in sorted(bank.substitutes.items()):
        arrays.update(_layer_arrays(f"sub/{i}", p))
        subs[str(i)] = {"kind": p.kind.value, "heads": p.heads, "gamma": p.gamma}
    header = {
        "format": CHECKPOINT_FORMAT,
        "n_layers": bank.n_layers,
        "d": bank.teacher[0].d,
        "order": list(bank.order),
        "conversions": conversions,
        "conversion_mask": bank.mask(conversions),
        "teacher_heads": [p.heads for p in bank.teacher],
        "substitutes": subs,
        "provenance": dict(provenance or {}),
    }
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return atomic_write(path, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        header = json.loads(str(arrays.pop("__header__")))
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: not a readable checkpoint ({exc})") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    teacher = [
        _layer_from(arrays, f"teacher/{i}", LayerKind.TEACHER, header["teacher_heads"][i], 0.5)
        for i in range(header["n_layers"])
    ]
    subs = {
        int(i): _layer_from(arrays, f"sub/{i}", LayerKind(s["kind"]), s["heads"], s["gamma"])
        for i, s in header["substitutes"].items()
    }
    bank = LayerBank(teacher, header["order"], subs)
    return Checkpoint(bank, header["conversions"], header["provenance"])


def profile_rows(model: ToyModel, X: np.ndarray) -> list[tuple]:
    """Final-query score curves of every layer and head on one sequence.

    ``score`` is the softmax row for teacher layers and the norm of the
    blended per-token score vector otherwise; ``gla`` is the history-state
    score alone (what a single-state layer with the same gate would give);
    ``history``/``recency`` are the gamma-weighted per-state norms.
    """
    rows = []
    for li, h in enumerate(model.hidden_states(X)[:-1]):
        p = model.layers[li]
        gla = None
        if p.kind is not LayerKind.TEACHER:
            gla = np.linalg.norm(attention_scores_parallel(p, h).sigma1[0], axis=-1)
        for prof in attention_profiles(p, h, li):
            for t, s in enumerate(prof.scores):
                rows.append(
                    (
                        li,
                        prof.head_index,
                        t,
                        p.kind.value,
                        float(s),
                        "" if gla is None else float(gla[prof.head_index, t]),
                        "" if prof.history is None else float(prof.history[t]),
                        "" if prof.recency is None else float(prof.recency[t]),
                        "" if p.kind is LayerKind.TEACHER else float(p.gamma),
                    )
                )
    return rows
