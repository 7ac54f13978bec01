"""Synthetic labeled flow corpora with planted attack intervals.

Background traffic is a Poisson stream of client-to-server flows with
log-normal sizes and durations. Each planted attack adds its own stream at
``intensity x background_rate`` flows per second for its interval:

* ddos: many external sources hitting one destination with tiny, mostly
  unanswered flows.
* port_scan: one source probing one destination on ascending ports with
  short failed connections.
* exfiltration: one internal host pushing large uploads to an external sink.
* backdoor_beacon: a few infected hosts calling home at a fixed period.

Output is a CSV plus a schema file in the format :mod:`.ingest` reads.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import SchemaSpec

logger = logging.getLogger(__name__)

ATTACK_TYPES = ("ddos", "port_scan", "exfiltration", "backdoor_beacon")
ATTACK_LABELS = {"ddos": "DDoS", "port_scan": "PortScan",
                 "exfiltration": "Exfiltration", "backdoor_beacon": "Backdoor"}
NORMAL = "Normal"

SCHEMA_PAIRS = (
    ("ts", "timestamp"), ("srcip", "src_entity"), ("sport", "ignore"),
    ("dstip", "dst_entity"), ("dport", "continuous"),
    ("proto", "categorical"), ("service", "categorical"), ("state", "categorical"),
    ("dur", "continuous"), ("sbytes", "continuous"), ("dbytes", "continuous"),
    ("spkts", "continuous"), ("dpkts", "continuous"),
    ("sttl", "continuous"), ("dttl", "continuous"),
    ("sload", "continuous"), ("dload", "continuous"),
    ("smean", "continuous"), ("dmean", "continuous"),
    ("sbytes_kb", "continuous"),          # deliberately collinear with sbytes
    ("tcprtt", "continuous"),             # missing for non-tcp flows
    ("trans_depth", "continuous"),        # http only, so mostly missing
    ("ct_srv_src", "continuous"), ("ct_dst_ltm", "continuous"),
    ("attack_cat", "label"),
)
SCHEMA = SchemaSpec.from_pairs(SCHEMA_PAIRS)
HISTORY = 100      # look-back for the ct_* connection counters

# background service mix: (service, proto, port, probability)
_SERVICES = (
    ("http", "tcp", 80, 0.35), ("https", "tcp", 443, 0.25), ("dns", "udp", 53, 0.20),
    ("ssh", "tcp", 22, 0.05), ("smtp", "tcp", 25, 0.05), ("ftp", "tcp", 21, 0.05),
    ("-", "udp", 0, 0.05),
)


@dataclass(frozen=True)
class Attack:
    type: str
    start: float
    duration: float
    intensity: float
    target: str | None = None

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class ScenarioSpec:
    duration: float = 600.0
    background_rate: float = 5.0
    entity_count: int = 40
    attacks: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0 or self.background_rate <= 0:
            raise ValueError("duration and background_rate must be positive")
        if self.entity_count < 4:
            raise ValueError("entity_count must be at least 4")
        for a in self.attacks:
            if a.type not in ATTACK_TYPES:
                raise ValueError(f"unknown attack type {a.type!r}; choose from {ATTACK_TYPES}")
            if a.start < 0 or a.duration <= 0 or a.end > self.duration:
                raise ValueError(f"attack {a.type} interval [{a.start}, {a.end}] outside [0, {self.duration}]")
            if a.intensity <= 0:
                raise ValueError(f"attack {a.type} needs a positive intensity")

    def dumps(self) -> str:
        lines = [f"duration = {self.duration!r}", f"background_rate = {self.background_rate!r}",
                 f"entity_count = {self.entity_count}", f"seed = {self.seed}"]
        for a in self.attacks:
            t = f" target={a.target}" if a.target else ""
            lines.append(f"attack = {a.type} start={a.start!r} duration={a.duration!r} "
                         f"intensity={a.intensity!r}{t}")
        return "\n".join(lines) + "\n"


def parse_scenario(text: str) -> ScenarioSpec:
    """Read ``key = value`` lines; ``attack = <type> start=.. duration=.. intensity=.. [target=..]``."""
    kw: dict = {}
    attacks = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"scenario line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "attack":
            parts = value.split()
            fields = dict(p.split("=", 1) for p in parts[1:])
            try:
                attacks.append(Attack(parts[0], float(fields["start"]), float(fields["duration"]),
                                      float(fields["intensity"]), fields.get("target")))
            except KeyError as exc:
                raise ValueError(f"scenario line {lineno}: attack missing {exc}") from None
        elif key in ("duration", "background_rate"):
            kw[key] = float(value)
        elif key in ("entity_count", "seed"):
            kw[key] = int(value)
        else:
            raise ValueError(f"scenario line {lineno}: unknown key {key!r}")
    return ScenarioSpec(attacks=tuple(attacks), **kw)


def preset(name: str, seed: int = 0) -> ScenarioSpec:
    """Named scenarios: ``toy`` (a few thousand flows) and ``desk`` (~16k flows)."""
    if name == "toy":
        return ScenarioSpec(duration=400.0, background_rate=4.0, entity_count=24, seed=seed, attacks=(
            Attack("ddos", 60.0, 6.0, 40.0),
            Attack("port_scan", 150.0, 6.0, 40.0),
            Attack("exfiltration", 240.0, 6.0, 40.0),
            Attack("backdoor_beacon", 300.0, 40.0, 4.0),
        ))
    if name == "desk":
        return ScenarioSpec(duration=1500.0, background_rate=4.0, entity_count=40, seed=seed, attacks=(
            Attack("ddos", 200.0, 8.0, 50.0),
            Attack("port_scan", 420.0, 8.0, 50.0),
            Attack("exfiltration", 650.0, 8.0, 50.0),
            Attack("ddos", 900.0, 7.0, 50.0),
            Attack("port_scan", 1050.0, 7.0, 50.0),
            Attack("exfiltration", 1200.0, 7.0, 50.0),
            Attack("backdoor_beacon", 1300.0, 100.0, 2.0),
        ))
    raise ValueError(f"unknown preset {name!r}; choose from toy, desk")


# ------------------------------------------------------------------ generation

@dataclass
class Corpus:
    """Generated rows (in time order, matching :data:`SCHEMA`) and label counts."""

    rows: list
    label_counts: Counter
    attacks: tuple = ()
    schema: SchemaSpec = field(default=SCHEMA, repr=False)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.schema.names)
        w.writerows(self.rows)
        return buf.getvalue()

    def write(self, csv_path, schema_path=None) -> None:
        Path(csv_path).write_text(self.csv_text(), encoding="utf-8")
        if schema_path is not None:
            self.schema.save(schema_path)


def _hosts(n: int) -> list[str]:
    return [f"10.0.{i // 250}.{i % 250 + 1}" for i in range(n)]


def _servers(hosts: Sequence[str]) -> list[str]:
    return list(hosts[: max(2, len(hosts) // 5)])


def resolve_attacks(spec: ScenarioSpec, rng: np.random.Generator) -> tuple[Attack, ...]:
    """Fill in default targets, then merge overlapping attacks on the same (type, target)."""
    hosts = _hosts(spec.entity_count)
    servers = _servers(hosts)
    clients = hosts[len(servers):]
    resolved = []
    for a in spec.attacks:
        if a.target is None:
            pool = clients if a.type == "exfiltration" else servers
            if a.type == "backdoor_beacon":
                target = "198.51.100.66"
            else:
                target = pool[int(rng.integers(len(pool)))]
            a = replace(a, target=target)
        resolved.append(a)
    resolved.sort(key=lambda a: (a.type, a.target, a.start))
    merged: list[Attack] = []
    for a in resolved:
        last = merged[-1] if merged else None
        if last is not None and (last.type, last.target) == (a.type, a.target) and a.start < last.end:
            logger.warning("overlapping %s attacks on %s merged: [%g, %g] and [%g, %g]",
                           a.type, a.target, last.start, last.end, a.start, a.end)
            end = max(last.end, a.end)
            merged[-1] = replace(last, duration=end - last.start, intensity=max(last.intensity, a.intensity))
        else:
            merged.append(a)
    merged.sort(key=lambda a: (a.start, a.type))
    return tuple(merged)


def _lognormal(rng, mu, sigma, n):
    return rng.lognormal(mu, sigma, n)


def _pkts(rng, nbytes, lo=300.0, hi=1400.0):
    per = rng.uniform(lo, hi, nbytes.size)
    return np.maximum(1, np.ceil(nbytes / per)).astype(np.int64)


def _flows(n, ts, src, dst, dport, proto, service, state, dur, sbytes, dbytes, spkts, dpkts, label, rng):
    return {
        "ts": ts, "src": np.asarray(src, dtype=object), "dst": np.asarray(dst, dtype=object),
        "sport": rng.integers(1024, 65536, n), "dport": np.asarray(dport, dtype=np.int64),
        "proto": np.asarray(proto, dtype=object), "service": np.asarray(service, dtype=object),
        "state": np.asarray(state, dtype=object), "dur": dur,
        "sbytes": np.round(sbytes).astype(np.int64), "dbytes": np.round(dbytes).astype(np.int64),
        "spkts": np.asarray(spkts, dtype=np.int64), "dpkts": np.asarray(dpkts, dtype=np.int64),
        "label": np.full(n, label, dtype=object),
    }


def _background(spec, rng, hosts, servers):
    n = int(rng.poisson(spec.background_rate * spec.duration))
    ts = np.sort(rng.uniform(0.0, spec.duration, n))
    weights = 1.0 / np.arange(1, len(servers) + 1)
    dst_i = rng.choice(len(servers), size=n, p=weights / weights.sum())
    src_i = rng.integers(0, len(hosts), n)
    clash = np.array([hosts[s] == servers[d] for s, d in zip(src_i, dst_i)], dtype=bool)
    src_i[clash] = (src_i[clash] + 1 + len(servers)) % len(hosts)
    probs = np.array([s[3] for s in _SERVICES])
    svc_i = rng.choice(len(_SERVICES), size=n, p=probs / probs.sum())
    service = np.array([_SERVICES[i][0] for i in svc_i], dtype=object)
    proto = np.array([_SERVICES[i][1] for i in svc_i], dtype=object)
    dport = np.array([_SERVICES[i][2] for i in svc_i], dtype=np.int64)
    high = dport == 0
    dport[high] = rng.integers(1024, 65536, int(high.sum()))
    tcp = proto == "tcp"
    state = np.where(tcp, rng.choice(np.array(["FIN", "CON", "RST"], dtype=object), n, p=[0.85, 0.1, 0.05]),
                     rng.choice(np.array(["CON", "INT"], dtype=object), n, p=[0.7, 0.3]))
    dns = service == "dns"
    dur = _lognormal(rng, -1.0, 1.2, n)
    dur[dns] = _lognormal(rng, -4.0, 0.5, int(dns.sum()))
    sbytes = _lognormal(rng, 6.5, 1.0, n)
    dbytes = _lognormal(rng, 8.0, 1.5, n)
    sbytes[dns] = _lognormal(rng, 4.2, 0.3, int(dns.sum()))
    dbytes[dns] = _lognormal(rng, 5.0, 0.4, int(dns.sum()))
    return _flows(n, ts, [hosts[i] for i in src_i], [servers[i] for i in dst_i], dport, proto, service,
                  state, dur, sbytes, dbytes, _pkts(rng, sbytes), _pkts(rng, dbytes), NORMAL, rng)


def _attack_times(rng, a: Attack, rate: float) -> np.ndarray:
    n = int(rng.poisson(rate * a.duration))
    return np.sort(rng.uniform(a.start, a.end, n))


def _ddos(a, rng, rate):
    ts = _attack_times(rng, a, rate)
    n = ts.size
    bots = [f"203.0.113.{i + 1}" for i in range(60)]
    src = [bots[i] for i in rng.integers(0, len(bots), n)]
    udp = rng.random(n) < 0.6
    proto = np.where(udp, "udp", "tcp").astype(object)
    service = np.where(udp, "-", "http").astype(object)
    dport = np.where(udp, 53, 80)
    state = np.where(udp, "INT", rng.choice(np.array(["REQ", "RST"], dtype=object), n)).astype(object)
    sbytes = _lognormal(rng, 4.5, 0.3, n)
    dbytes = np.where(rng.random(n) < 0.9, 0.0, _lognormal(rng, 4.0, 0.3, n))
    spkts = rng.integers(1, 3, n)
    dpkts = (dbytes > 0).astype(np.int64)
    return _flows(n, ts, src, [a.target] * n, dport, proto, service, state,
                  _lognormal(rng, -6.0, 0.5, n), sbytes, dbytes, spkts, dpkts, ATTACK_LABELS[a.type], rng)


def _port_scan(a, rng, rate):
    ts = _attack_times(rng, a, rate)
    n = ts.size
    dport = (np.arange(n) % 65535) + 1
    known = {80: "http", 443: "https", 53: "dns", 22: "ssh", 25: "smtp", 21: "ftp"}
    service = np.array([known.get(int(p), "-") for p in dport], dtype=object)
    state = rng.choice(np.array(["RST", "REQ"], dtype=object), n, p=[0.7, 0.3])
    answered = state == "RST"
    return _flows(n, ts, ["198.51.100.7"] * n, [a.target] * n, dport, ["tcp"] * n, service, state,
                  _lognormal(rng, -7.0, 0.5, n), rng.uniform(40, 60, n), np.where(answered, 40.0, 0.0),
                  np.ones(n, dtype=np.int64), answered.astype(np.int64), ATTACK_LABELS[a.type], rng)


def _exfiltration(a, rng, rate):
    ts = _attack_times(rng, a, rate)
    n = ts.size
    opts = (("https", 443), ("ssh", 22), ("ftp-data", 20))
    pick = rng.integers(0, len(opts), n)
    service = np.array([opts[i][0] for i in pick], dtype=object)
    dport = np.array([opts[i][1] for i in pick])
    sbytes = _lognormal(rng, 13.0, 0.4, n)
    dbytes = _lognormal(rng, 6.0, 0.3, n)
    state = rng.choice(np.array(["FIN", "CON"], dtype=object), n, p=[0.8, 0.2])
    return _flows(n, ts, [a.target] * n, ["198.51.100.23"] * n, dport, ["tcp"] * n, service, state,
                  _lognormal(rng, 1.5, 0.4, n), sbytes, dbytes, _pkts(rng, sbytes, 1200, 1460),
                  _pkts(rng, dbytes), ATTACK_LABELS[a.type], rng)


def _beacon(a, rng, rate, clients):
    n_hosts = min(3, len(clients))
    infected = [clients[i] for i in rng.choice(len(clients), n_hosts, replace=False)]
    period = n_hosts / rate
    ts, src = [], []
    for k, host in enumerate(infected):
        t = a.start + period * (k + 0.5) / n_hosts + np.arange(0.0, a.duration, period)
        t = t[t < a.end]
        ts.append(t)
        src += [host] * t.size
    ts = np.concatenate(ts)
    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    src = [src[i] for i in order]
    n = ts.size
    sbytes = _lognormal(rng, 5.5, 0.05, n)
    dbytes = _lognormal(rng, 5.8, 0.05, n)
    return _flows(n, ts, src, [a.target] * n, np.full(n, 4444), ["tcp"] * n, ["-"] * n, ["FIN"] * n,
                  _lognormal(rng, -2.5, 0.1, n), sbytes, dbytes, np.full(n, 3), np.full(n, 3),
                  ATTACK_LABELS[a.type], rng)


def _counters(src, dst, service) -> tuple[np.ndarray, np.ndarray]:
    """Per flow: prior flows (of the last HISTORY) sharing src+service, and sharing dst."""
    window: deque = deque()
    by_srv: Counter = Counter()
    by_dst: Counter = Counter()
    ct_srv = np.empty(len(src), dtype=np.int64)
    ct_dst = np.empty(len(src), dtype=np.int64)
    for i, (s, d, v) in enumerate(zip(src, dst, service)):
        ct_srv[i] = by_srv[(s, v)]
        ct_dst[i] = by_dst[d]
        window.append((s, d, v))
        by_srv[(s, v)] += 1
        by_dst[d] += 1
        if len(window) > HISTORY:
            os_, od, ov = window.popleft()
            by_srv[(os_, ov)] -= 1
            by_dst[od] -= 1
    return ct_srv, ct_dst


def _num(x: float) -> str:
    return f"{x:.6g}"


def generate(spec: ScenarioSpec) -> Corpus:
    """Deterministic corpus for ``spec`` (same seed, same bytes)."""
    rng = np.random.default_rng(spec.seed)
    hosts = _hosts(spec.entity_count)
    servers = _servers(hosts)
    clients = hosts[len(servers):]
    attacks = resolve_attacks(spec, rng)
    parts = [_background(spec, rng, hosts, servers)]
    for a in attacks:
        rate = a.intensity * spec.background_rate
        if a.type == "ddos":
            parts.append(_ddos(a, rng, rate))
        elif a.type == "port_scan":
            parts.append(_port_scan(a, rng, rate))
        elif a.type == "exfiltration":
            parts.append(_exfiltration(a, rng, rate))
        else:
            parts.append(_beacon(a, rng, rate, clients))
    f = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    order = np.argsort(f["ts"], kind="stable")
    f = {k: v[order] for k, v in f.items()}
    n = f["ts"].size
    ct_srv, ct_dst = _counters(f["src"], f["dst"], f["service"])
    rows = []
    for i in range(n):
        src, proto, svc = f["src"][i], f["proto"][i], f["service"][i]
        dur = float(f["dur"][i])
        sb, db = int(f["sbytes"][i]), int(f["dbytes"][i])
        sp, dp = int(f["spkts"][i]), int(f["dpkts"][i])
        external = not src.startswith("10.")
        rtt = _num(dur * 0.05) if proto == "tcp" else ""
        depth = str(1 + int(sb) % 3) if svc == "http" else ""
        rows.append((
            f"{f['ts'][i]:.6f}", src, str(int(f["sport"][i])), f["dst"][i], str(int(f["dport"][i])),
            proto, svc, f["state"][i], f"{dur:.6f}", str(sb), str(db), str(sp), str(dp),
            "254" if external else "62", "252" if not f["dst"][i].startswith("10.") else "60",
            _num(sb * 8.0 / dur if dur > 0 else 0.0), _num(db * 8.0 / dur if dur > 0 else 0.0),
            _num(sb / sp if sp else 0.0), _num(db / dp if dp else 0.0), _num(sb / 1024.0),
            rtt, depth, str(int(ct_srv[i])), str(int(ct_dst[i])), f["label"][i],
        ))
    counts = Counter(f["label"].tolist())
    logger.info("generated %d flows: %s", n, dict(sorted(counts.items())))
    return Corpus(rows, counts, attacks)


def flow_rate(corpus: Corpus, start: float, end: float) -> float:
    """Flows per second with timestamps in [start, end)."""
    ts = np.array([float(r[0]) for r in corpus.rows])
    return float(((ts >= start) & (ts < end)).sum()) / (end - start)


def interval_counts(corpus: Corpus, width: float) -> np.ndarray:
    ts = np.array([float(r[0]) for r in corpus.rows])
    if ts.size == 0:
        return np.zeros(0, dtype=np.int64)
    bins = np.arange(0.0, math.floor(ts.max() / width) * width + 2 * width, width)
    return np.histogram(ts, bins)[0]
