"""Scenario files: JSON schema validation, model construction, round trip.

Internally every size is in bits and every rate in bits/s. The file format
takes packet sizes in bytes and lets rates be given in bytes/s or bits/s.
Re-emitted documents always use bits/s (``to_document``), so two files that
describe the same model serialize to the same canonical bytes and hash.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from .core import QosClass, ScenarioError, ServiceKind, Topology, validate_scenario
from .subcarrier import LinkModel, subcarrier_capacity

SCHEMA_VERSION = 1
DEFAULT_SEED = 1
DEFAULT_HORIZON = 1_000_000


def schema() -> dict:
    return json.loads(resources.files("m2msched.data").joinpath("scenario.schema.json").read_text())


def bundled(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``paper_s7a.json``."""
    return Path(str(resources.files("m2msched.data").joinpath(name)))


@dataclass(frozen=True)
class SimSettings:
    seed: int = DEFAULT_SEED
    horizon_packets: int = DEFAULT_HORIZON
    warmup_packets: int | None = None
    epoch: float | None = None


@dataclass(frozen=True)
class SmartMetering:
    """Per-MA smart meter population that generates the arrival matrix.

    Class 1 comes from the eSM fraction of each MA's meters, classes 2 and 3
    from every meter, and class 4 from a commercial/residential mix. All
    rates are multiplied by ``scale``.
    """

    sm_counts: tuple[int, ...]
    commercial_fraction: tuple[float, ...]
    esm_share: tuple[float, ...]
    per_sm_rates: tuple[tuple[str, float], ...]
    utilization_target: float
    reference_esm_share: float
    sweep_ma: int = 2
    sweep_esm_share: tuple[float, float, float] | None = None

    def rates(self) -> dict[str, float]:
        return dict(self.per_sm_rates)

    def raw_matrix(self, esm_share: Sequence[float] | None = None) -> list[list[float]]:
        """Unscaled lambda_ik (rows are classes, columns MAs)."""
        share = self.esm_share if esm_share is None else esm_share
        r = self.rates()
        M = len(self.sm_counts)
        out = [[0.0] * M for _ in range(4)]
        for k in range(M):
            n = self.sm_counts[k]
            out[0][k] = share[k] * n * r["esm"]
            out[1][k] = n * r["pricing"]
            out[2][k] = n * r["on_demand"]
            f = self.commercial_fraction[k]
            out[3][k] = n * (f * r["regular_commercial"] + (1.0 - f) * r["regular_residential"])
        return out

    def shares_at(self, value: float) -> tuple[float, ...]:
        s = list(self.esm_share)
        s[self.sweep_ma - 1] = value
        return tuple(s)

    def scale_factor(self, classes_bits: Sequence[float], link: LinkModel) -> float:
        """Uniform factor giving total subcarrier utilization = target at the
        reference eSM share of the sweep MA.

        Utilization is sum_k load_k / C_s,k divided by N, i.e. the fraction
        of all subcarriers the traffic would occupy at rho = 1 per MA.
        """
        raw = self.raw_matrix(self.shares_at(self.reference_esm_share))
        need = 0.0
        for k in range(len(self.sm_counts)):
            load = sum(raw[i][k] * classes_bits[i] for i in range(4))
            need += load / subcarrier_capacity(link, k + 1)
        if need <= 0:
            raise ScenarioError("smart-metering load is zero")
        return self.utilization_target * link.N / need


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: Topology
    service: ServiceKind
    sim: SimSettings = SimSettings()
    link: LinkModel | None = None
    smart_metering: SmartMetering | None = None
    scale: float = 1.0  # applied to the generated arrival matrix
    esm_point: float | None = None  # sweep MA eSM share currently in force
    sweep_lambda1: tuple[float, float, float] | None = None
    notes: tuple[str, ...] = field(default=(), compare=False)

    @property
    def classes(self) -> tuple[QosClass, ...]:
        return self.topology.classes

    def as_only(self) -> Topology:
        """The AS alone, fed by the aggregate class rates."""
        return Topology.single_node(self.topology.classes, self.topology.as_capacity)

    def with_lambda1(self, lam1: float) -> "Scenario":
        """Class 1 total rate set to ``lam1``; its per-MA split keeps its shape."""
        t = self.topology
        row = t.arrival_matrix[0]
        total = math.fsum(row)
        if t.M == 1 or total == 0:
            new_row = (lam1,) + (0.0,) * (t.M - 1)
        else:
            new_row = tuple(x * lam1 / total for x in row)
        return self._replace_matrix((new_row,) + t.arrival_matrix[1:])

    def with_esm_share(self, value: float) -> "Scenario":
        """Regenerate the arrivals with the sweep MA's eSM share set to ``value``.

        The scale factor stays the one fixed at the reference share, so the
        sweep changes only the eSM traffic.
        """
        if self.smart_metering is None:
            raise ScenarioError("scenario has no smart_metering block to sweep")
        sm = self.smart_metering
        raw = sm.raw_matrix(sm.shares_at(value))
        matrix = tuple(tuple(x * self.scale for x in row) for row in raw)
        return dataclasses.replace(self._replace_matrix(matrix), esm_point=value)

    def _replace_matrix(self, matrix) -> "Scenario":
        t = self.topology
        classes = tuple(dataclasses.replace(c, lam=math.fsum(matrix[c.id - 1])) for c in t.classes)
        topo = Topology(t.M, classes, matrix, t.as_capacity, t.ma_capacities, t.channel_gains)
        return dataclasses.replace(self, topology=topo)


# ------------------------------------------------------------------ parsing

def load(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {path}: {e.strerror}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"scenario {path} is not valid JSON: {e}") from e
    return parse(doc)


def validate_document(doc: Any) -> None:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ScenarioError(f"scenario schema violation at {where}: {e.message}")


def parse(doc: Any) -> Scenario:
    """Validate ``doc`` against the schema and build the model."""
    validate_document(doc)
    doc = copy.deepcopy(doc)
    topo_doc = doc["topology"]
    M = topo_doc["M"]
    raw_classes = doc["classes"]
    R = len(raw_classes)
    sizes = [8.0 * c["packet_size_bytes"] for c in raw_classes]

    unit = "bytes" if "as_rate_bytes_per_s" in topo_doc else "bps"
    as_cap = topo_doc["as_rate_bps"] if unit == "bps" else 8.0 * topo_doc["as_rate_bytes_per_s"]

    link = None
    ma_caps = None
    if "link" in topo_doc:
        L = topo_doc["link"]
        link = LinkModel(L["W_hz"], LinkModel.db_to_linear(L["snr_db"]), L["gains"], L["N"])
        if link.M != M:
            raise ScenarioError(f"link lists {link.M} gains for {M} MAs")
    elif "ma_rates_bps" in topo_doc:
        ma_caps = [float(x) for x in topo_doc["ma_rates_bps"]]
    elif "ma_rates_bytes_per_s" in topo_doc:
        ma_caps = [8.0 * x for x in topo_doc["ma_rates_bytes_per_s"]]
    if ma_caps is not None and len(ma_caps) != M:
        raise ScenarioError(f"need {M} MA rates, got {len(ma_caps)}")

    sm = None
    scale = 1.0
    esm_point = None
    if "smart_metering" in doc:
        if "arrival_matrix" in topo_doc:
            raise ScenarioError("give either topology.arrival_matrix or smart_metering, not both")
        if link is None:
            raise ScenarioError("smart_metering needs topology.link to fix its scale factor")
        if R != 4:
            raise ScenarioError("smart_metering generates exactly 4 classes")
        sm = _smart_metering(doc["smart_metering"], M)
        scale = sm.scale_factor(sizes, link)
        esm_point = sm.esm_share[sm.sweep_ma - 1]
        matrix = [[x * scale for x in row] for row in sm.raw_matrix()]
    elif "arrival_matrix" in topo_doc:
        matrix = topo_doc["arrival_matrix"]
        if len(matrix) != R or any(len(row) != M for row in matrix):
            raise ScenarioError(f"arrival_matrix must be {R} rows x {M} columns")
    else:
        if M != 1:
            raise ScenarioError("arrival_matrix is required when M > 1")
        if any("lambda" not in c for c in raw_classes):
            raise ScenarioError("every class needs lambda when there is no arrival_matrix")
        matrix = [[c["lambda"]] for c in raw_classes]

    classes = []
    for i, c in enumerate(raw_classes):
        total = math.fsum(matrix[i])
        if "lambda" in c and not math.isclose(c["lambda"], total, rel_tol=1e-9, abs_tol=1e-15):
            raise ScenarioError(f"class {i + 1}: lambda {c['lambda']} != arrival_matrix row sum {total}")
        classes.append(QosClass(i + 1, total, sizes[i], c["a"], c["b"], c["beta"]))

    topo = Topology(M, tuple(classes), matrix, as_cap, None if ma_caps is None else tuple(ma_caps),
                    None if link is None else link.gains)
    bad = [v for v in validate_scenario(topo) if v.constraint != "rate mismatch"]
    if bad:
        raise ScenarioError("; ".join(map(str, bad)))

    s = doc.get("sim", {})
    sim = SimSettings(s.get("seed", DEFAULT_SEED), s.get("horizon_packets", DEFAULT_HORIZON),
                      s.get("warmup_packets"), s.get("epoch"))
    sweep = doc.get("sweep", {}).get("lambda1")
    return Scenario(doc.get("name", ""), topo, ServiceKind(doc["service"]), sim, link, sm, scale, esm_point,
                    None if sweep is None else tuple(sweep), tuple(doc.get("notes", ())))


def _smart_metering(d: dict, M: int) -> SmartMetering:
    for key in ("sm_counts", "commercial_fraction", "esm_share"):
        if len(d[key]) != M:
            raise ScenarioError(f"smart_metering.{key} needs {M} entries")
    sweep_ma = d.get("sweep_ma", 2)
    if sweep_ma > M:
        raise ScenarioError(f"smart_metering.sweep_ma {sweep_ma} > M = {M}")
    sweep = d.get("sweep_esm_share")
    return SmartMetering(tuple(d["sm_counts"]), tuple(d["commercial_fraction"]), tuple(d["esm_share"]),
                         tuple(sorted(d["per_sm_rates"].items())), d["utilization_target"],
                         d["reference_esm_share"], sweep_ma, None if sweep is None else tuple(sweep))


# ------------------------------------------------------------- serialization

def to_document(s: Scenario) -> dict:
    """Canonical document for ``s`` (rates in bits/s, sizes in bytes)."""
    t = s.topology
    doc: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
    if s.name:
        doc["name"] = s.name
    if s.notes:
        doc["notes"] = list(s.notes)
    doc["classes"] = [{"lambda": c.lam, "packet_size_bytes": c.packet_size / 8.0, "a": c.a, "b": c.b, "beta": c.beta}
                      for c in t.classes]
    topo: dict[str, Any] = {"M": t.M, "as_rate_bps": t.as_capacity}
    if s.smart_metering is None:
        topo["arrival_matrix"] = [list(row) for row in t.arrival_matrix]
    else:
        for c in doc["classes"]:
            del c["lambda"]
    if s.link is not None:
        topo["link"] = {"W_hz": s.link.W, "snr_db": 10.0 * math.log10(s.link.snr), "gains": list(s.link.gains),
                        "N": s.link.N}
    elif t.ma_capacities is not None:
        topo["ma_rates_bps"] = list(t.ma_capacities)
    doc["topology"] = topo
    if s.smart_metering is not None:
        sm = s.smart_metering
        shares = list(sm.esm_share)
        if s.esm_point is not None:
            shares[sm.sweep_ma - 1] = s.esm_point
        block: dict[str, Any] = {
            "sm_counts": list(sm.sm_counts), "commercial_fraction": list(sm.commercial_fraction),
            "esm_share": shares, "per_sm_rates": dict(sm.per_sm_rates),
            "utilization_target": sm.utilization_target, "reference_esm_share": sm.reference_esm_share,
            "sweep_ma": sm.sweep_ma,
        }
        if sm.sweep_esm_share is not None:
            block["sweep_esm_share"] = list(sm.sweep_esm_share)
        doc["smart_metering"] = block
    doc["service"] = s.service.value
    sim = {"seed": s.sim.seed, "horizon_packets": s.sim.horizon_packets, "warmup_packets": s.sim.warmup_packets,
           "epoch": s.sim.epoch}
    doc["sim"] = sim
    if s.sweep_lambda1 is not None:
        doc["sweep"] = {"lambda1": list(s.sweep_lambda1)}
    return doc


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def scenario_hash(s: Scenario) -> str:
    """sha256 of the canonical document, first 16 hex digits."""
    return hashlib.sha256(canonical_json(to_document(s)).encode()).hexdigest()[:16]


def parse_sweep(text: str) -> tuple[str, tuple[float, float, float]]:
    """``name=start:step:stop`` into (name, (start, step, stop))."""
    name, sep, rng = text.partition("=")
    parts = rng.split(":")
    if not sep or len(parts) != 3:
        raise ScenarioError(f"sweep must look like name=start:step:stop, got {text!r}")
    try:
        start, step, stop = (float(p) for p in parts)
    except ValueError as e:
        raise ScenarioError(f"bad sweep number in {text!r}") from e
    return name.strip(), (start, step, stop)


def sweep_values(start: float, step: float, stop: float) -> list[float]:
    """Inclusive grid; values are rounded to 12 digits so 0.1+0.2 style noise
    never adds or drops the end point."""
    if step <= 0 or stop < start:
        raise ScenarioError(f"sweep needs step > 0 and stop >= start, got {start}:{step}:{stop}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + j * step, 12) for j in range(n)]
