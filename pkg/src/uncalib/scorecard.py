"""Compare an alert stream with the outcomes a scenario manifest expects."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InputError
from .telemetry import DEFAULT_KINDS, parse_timestamp

EVENT_FIELDS = ("sensor_id", "onset", "confirmed_at", "direction", "estimated_deviation",
                "time_to_tolerance_minutes", "density_at_confirmation")


def read_manifest(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InputError(f"manifest line {lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def manifest_drifts(manifest: dict) -> list:
    drifts = []
    for k in range(int(manifest.get("drifts", "0"))):
        p = f"drift.{k}."
        drifts.append({
            "split": manifest[p + "split"],
            "targets": manifest[p + "targets"].split(","),
            "kind": manifest[p + "kind"],
            "onset": parse_timestamp(manifest[p + "onset"]),
            "magnitude": float(manifest[p + "magnitude"]),
        })
    return drifts


def _events(records) -> list:
    events = []
    for i, rec in enumerate(records):
        if rec.get("type") != "event":
            continue
        missing = [f for f in EVENT_FIELDS if f not in rec]
        if missing:
            raise InputError(f"event record {i + 1} lacks {', '.join(missing)}")
        try:
            ev = dict(rec, onset_minute=parse_timestamp(rec["onset"]),
                      confirmed_minute=parse_timestamp(rec["confirmed_at"]),
                      estimated_deviation=float(rec["estimated_deviation"]))
        except (TypeError, ValueError) as exc:
            raise InputError(f"event record {i + 1}: {exc}") from None
        events.append(ev)
    return events


@dataclass
class Scorecard:
    lines: list = field(default_factory=list)
    passed: bool = True
    detected: int = 0
    expected: int = 0
    false_positives: int = 0

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


def evaluate(manifest: dict, records, split: str = "test") -> Scorecard:
    """Per injected drift: detection, deviation, latency; plus false positives.

    ``expect.events=drift`` requires every drift in ``split`` to be detected
    with a deviation at confirmation of at most ``expect.max_deviation``;
    ``expect.events=none`` requires silence.  Events on sensors outside the
    drift targets, or confirmed before the drift began, are false positives.
    """
    card = Scorecard()
    events = _events(records)
    mode = manifest.get("expect.events", "none")
    drifts = [d for d in manifest_drifts(manifest) if d["split"] == split]
    kind = manifest.get("kind", "")
    unit = DEFAULT_KINDS[kind].unit if kind in DEFAULT_KINDS else ""
    card.lines.append(f"scenario {manifest.get('scenario', '?')} seed {manifest.get('seed', '?')}")

    matched = set()
    if mode == "drift":
        limit = float(manifest.get("expect.max_deviation", "inf"))
        direction = manifest.get("expect.direction")
        for k, d in enumerate(drifts):
            card.expected += 1
            hits = [i for i, ev in enumerate(events)
                    if ev["sensor_id"] in d["targets"] and ev["confirmed_minute"] >= d["onset"]]
            label = f"drift {k} on {','.join(d['targets'])} ({d['kind']}, {d['magnitude']:g} {unit})"
            if not hits:
                card.lines.append(f"{label}: missed detection")
                card.passed = False
                continue
            first = events[hits[0]]
            matched.update(hits)
            latency = first["confirmed_minute"] - d["onset"]
            within = first["estimated_deviation"] <= limit
            ok = within and (direction is None or first["direction"] == direction)
            card.detected += 1
            card.lines.append(
                f"{label}: detected at {first['confirmed_at']} after {latency} min, "
                f"deviation {first['estimated_deviation']:.4f} {unit} "
                f"{'<=' if within else '>'} {limit:g}, direction {first['direction']}: {'ok' if ok else 'FAIL'}"
            )
            card.passed &= ok
    card.false_positives = sum(1 for i in range(len(events)) if i not in matched)
    for i, ev in enumerate(events):
        if i not in matched:
            card.lines.append(f"false positive: {ev['sensor_id']} confirmed at {ev['confirmed_at']}")
    allowed = int(manifest.get("expect.false_positives", "0"))
    if card.false_positives > allowed:
        card.passed = False
    if mode == "drift":
        limit_text = manifest.get("expect.max_deviation", "inf")
        card.lines.append(f"summary: {card.detected}/{card.expected} detected, deviation <= {limit_text} {unit}, "
                          f"{card.false_positives} false positives")
    else:
        card.lines.append(f"summary: no drift expected, {card.false_positives} events")
    card.lines.append("result: " + ("PASS" if card.passed else "FAIL"))
    return card
