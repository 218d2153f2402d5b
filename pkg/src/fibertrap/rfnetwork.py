"""Complex nodal analysis of the two-output RF drive network.

A network is a list of two-terminal branches (capacitors and resistors)
between named nodes.  One node is an ideal unit voltage source, one is
ground, and two probe nodes give the electrode voltages V1 and V2.
Zero-ohm resistors are treated as shorts and their end nodes merged.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np


class NetworkError(ValueError):
    pass


class SingularNetwork(NetworkError):
    pass


class ProbeUndefined(NetworkError):
    pass


@dataclass(frozen=True)
class Branch:
    a: str
    b: str
    kind: str  # "C" or "R"
    value: float
    id: str = ""

    def __post_init__(self):
        if self.kind not in ("C", "R"):
            raise NetworkError(f"unknown element kind {self.kind!r}")
        if self.kind == "C" and not self.value > 0:
            raise NetworkError("capacitance must be positive")
        if self.kind == "R" and self.value < 0:
            raise NetworkError("resistance must be non-negative")

    def admittance(self, omega):
        if self.kind == "C":
            return 1j * omega * self.value
        return 1.0 / self.value


@dataclass(frozen=True)
class Network:
    branches: tuple
    source: str = "src"
    ground: str = "gnd"
    probes: tuple = ("v1", "v2")
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def nodes(self):
        out = []
        for br in self.branches:
            for n in (br.a, br.b):
                if n not in out:
                    out.append(n)
        return out

    def branch(self, bid):
        for br in self.branches:
            if br.id == bid:
                return br
        raise KeyError(bid)

    def with_value(self, bid, value):
        return replace(self, branches=tuple(replace(b, value=value) if b.id == bid else b for b in self.branches))

    def with_branch(self, br):
        return replace(self, branches=self.branches + (br,))

    def to_dict(self):
        return {
            "source": self.source,
            "ground": self.ground,
            "probes": list(self.probes),
            "branches": [{"id": b.id, "a": b.a, "b": b.b, "kind": b.kind, "value": b.value} for b in self.branches],
        }

    @classmethod
    def from_dict(cls, d):
        brs = tuple(
            Branch(str(b["a"]), str(b["b"]), str(b["kind"]).upper(), float(b["value"]), str(b.get("id", f"b{i}")))
            for i, b in enumerate(d["branches"])
        )
        return cls(
            branches=brs,
            source=d.get("source", "src"),
            ground=d.get("ground", "gnd"),
            probes=tuple(d.get("probes", ("v1", "v2"))),
        )

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class RatioResult:
    delta: float
    theta: float

    @property
    def theta_deg(self):
        return math.degrees(self.theta)


def _merge_shorts(net):
    parent = {n: n for n in net.nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for br in net.branches:
        if br.kind == "R" and br.value == 0:
            ra, rb = find(br.a), find(br.b)
            if ra != rb:
                # keep source/ground as representatives
                if rb in (net.source, net.ground):
                    ra, rb = rb, ra
                parent[rb] = ra
    if find(net.source) == find(net.ground):
        raise SingularNetwork("source shorted to ground")
    return find


def _check_connected(net, find):
    adj = {}
    for br in net.branches:
        a, b = find(br.a), find(br.b)
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    seen, stack = set(), [find(net.source)]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(adj.get(n, ()))
    for n in (net.ground, *net.probes):
        if n not in net.nodes:
            raise ProbeUndefined(f"node {n!r} not in network")
        if find(n) not in seen:
            raise SingularNetwork(f"node {n!r} not connected to the source")


def solve(net: Network, omega: float) -> dict:
    """Node voltages for a 1 + 0j source; returns ``{node: complex}``."""
    if not omega > 0:
        raise NetworkError("omega must be positive")
    if net.source not in net.nodes or net.ground not in net.nodes:
        raise NetworkError("network must contain source and ground nodes")
    find = _merge_shorts(net)
    _check_connected(net, find)
    src, gnd = find(net.source), find(net.ground)
    reps = sorted({find(n) for n in net.nodes} - {src, gnd})
    idx = {n: i for i, n in enumerate(reps)}
    known = {src: 1.0 + 0j, gnd: 0j}
    Y = np.zeros((len(reps), len(reps)), dtype=complex)
    rhs = np.zeros(len(reps), dtype=complex)
    for br in net.branches:
        a, b = find(br.a), find(br.b)
        if a == b:
            continue
        y = br.admittance(omega)
        for p, q in ((a, b), (b, a)):
            if p in idx:
                Y[idx[p], idx[p]] += y
                if q in idx:
                    Y[idx[p], idx[q]] -= y
                else:
                    rhs[idx[p]] += y * known[q]
    if reps:
        if np.linalg.matrix_rank(Y) < len(reps):
            raise SingularNetwork("admittance matrix is singular")
        v = np.linalg.solve(Y, rhs)
    else:
        v = np.zeros(0, dtype=complex)
    out = {}
    for n in net.nodes:
        r = find(n)
        out[n] = known[r] if r in known else v[idx[r]]
    return out


def kcl_residual(net, omega, volts):
    """Largest current imbalance over the non-source, non-ground nodes.

    Imbalances are relative to the largest total current through any node,
    so idle nodes (no current, voltage set by rounding) do not register.
    """
    inj = {n: 0j for n in net.nodes}
    scale = {n: 0.0 for n in net.nodes}
    for br in net.branches:
        if br.kind == "R" and br.value == 0:
            continue
        i = br.admittance(omega) * (volts[br.a] - volts[br.b])
        inj[br.a] -= i
        inj[br.b] += i
        scale[br.a] += abs(i)
        scale[br.b] += abs(i)
    ref = max(scale.values(), default=0.0)
    worst = 0.0
    for n in net.nodes:
        if n in (net.source, net.ground) or ref == 0:
            continue
        worst = max(worst, abs(inj[n]) / ref)
    return worst


def ratio(net: Network, omega: float) -> RatioResult:
    for p in net.probes:
        if p not in net.nodes:
            raise ProbeUndefined(f"probe node {p!r} missing")
    v = solve(net, omega)
    v1, v2 = v[net.probes[0]], v[net.probes[1]]
    if v1 == 0:
        raise ProbeUndefined("V1 is zero; ratio undefined")
    r = v2 / v1
    theta = math.atan2(r.imag, r.real)
    if theta == -math.pi:
        theta = math.pi
    return RatioResult(abs(r), theta)


def sensitivity(net: Network, omega: float, element_id: str, relative_perturbation=1e-6):
    """Central-difference response of the ratio to a relative change of one element.

    Returns ``(d_delta / delta, d_theta)`` for the given fractional change,
    i.e. the perturbation is applied, not normalized away.
    """
    br = net.branch(element_id)
    h = relative_perturbation
    if br.value == 0:
        return 0.0, 0.0
    up = ratio(net.with_value(element_id, br.value * (1 + h)), omega)
    dn = ratio(net.with_value(element_id, br.value * (1 - h)), omega)
    base = ratio(net, omega)
    d_delta = (up.delta - dn.delta) / 2
    d_theta = (up.theta - dn.theta) / 2
    return d_delta / base.delta, d_theta


C1_DEFAULT = 30e-12
C2_DEFAULT = 30e-12
C12_DEFAULT = 3e-12
CV_RANGE = (0.5e-12, 30e-12)


def default_paper_network(
    cv: float, c1=C1_DEFAULT, c2=C2_DEFAULT, c12=C12_DEFAULT, r1=0.0, r2=0.0, c12_at_electrodes=False
) -> Network:
    """Source on V1; Cv and C12 in parallel from V1 to V2; C1, C2 to ground.

    ``r1``, ``r2`` are series wire resistances between the network and the
    electrode capacitances C1, C2 (the electrodes are the probe nodes).
    With ``c12_at_electrodes`` the coupling C12 joins the electrodes
    themselves, downstream of the wire resistances.
    """
    lo, hi = CV_RANGE
    if not (lo * (1 - 1e-9) <= cv <= hi * (1 + 1e-9)):
        warnings.warn(f"Cv = {cv:g} F outside the tunable range {lo:g}-{hi:g} F", stacklevel=2)
    brs = (
        Branch("src", "n1", "R", 0.0, "wire_src"),
        Branch("n1", "n2", "C", cv, "Cv"),
        Branch("v1", "v2", "C", c12, "C12") if c12_at_electrodes else Branch("n1", "n2", "C", c12, "C12"),
        Branch("n1", "v1", "R", r1, "R1"),
        Branch("n2", "v2", "R", r2, "R2"),
        Branch("v1", "gnd", "C", c1, "C1"),
        Branch("v2", "gnd", "C", c2, "C2"),
    )
    return Network(brs)


def closed_form_delta(cv, c2=C2_DEFAULT, c12=C12_DEFAULT):
    return (cv + c12) / (cv + c12 + c2)


def write_sweep(path, cvs, omega, **kw):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cv_F", "delta", "theta_deg"])
        for cv in cvs:
            r = ratio(default_paper_network(cv, **kw), omega)
            w.writerow([f"{cv:.6g}", f"{r.delta:.12g}", f"{r.theta_deg:.12g}"])
