"""Online operation: poll data sources, keep the tables, predict every 15 minutes.

Each cycle fires ``lead_seconds`` before a quarter-hour boundary and
predicts the 96 steps starting at that boundary. Raw and cleaned data and
the predictions live in one SQLite file; each cycle's result is also written
atomically as a CSV file into the output directory.

The ``degraded_flag`` column is a bit mask: 1 a source could not be read
this cycle, 2 no usable service forecast (ARI-only path), 4 recent
measurements missing beyond the gap-fill limit (persistence path).
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import logging
import os
import sqlite3
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arimodels, cleaning, ensemble, flatfile, gate
from .pipeline import HORIZON, SR_MEMBERS, Predictors, gp_forecasts, service_on_grid
from .timeseries import Flag, ForecastMatrix, TimeSeries, format_timestamp, series_from_records, to_datetime64

log = logging.getLogger(__name__)

KINDS = ("sr", "gp", "service_forecast")
GRID_STEP = 900
OUTPUT_ENV = "HELIOFORGE_OUTPUT_DIR"

DEGRADED_SOURCE = 1
DEGRADED_NO_SERVICE = 2
DEGRADED_PERSISTENCE = 4


class StorageError(RuntimeError):
    """The state database cannot be used; the service must stop."""


@dataclass(frozen=True)
class Source:
    name: str
    kind: str
    location: str  # directory, file or http(s) URL

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"source {self.name!r}: kind must be one of {', '.join(KINDS)}")


@dataclass(frozen=True)
class ScheduleConfig:
    sources: tuple[Source, ...] = ()
    output_dir: Path = Path("predictions")
    database: Path = Path("helioforge.sqlite")
    predictor_store: Path = Path("store")
    cycle_minutes: int = 15
    lead_seconds: int = 60
    timeout_seconds: float = 20.0
    retention_days: int = 30
    history_days: int = 3
    max_gap: int = cleaning.DEFAULT_MAX_GAP

    def __post_init__(self):
        if self.cycle_minutes <= 0:
            raise ValueError("cycle_minutes must be positive")
        if not 0 <= self.lead_seconds < self.cycle_minutes * 60:
            raise ValueError("lead_seconds must be shorter than one cycle")
        if self.history_days < 3:
            raise ValueError("history_days must be >= 3")
        if self.retention_days <= self.history_days:
            raise ValueError("retention_days must exceed history_days")
        names = [s.name for s in self.sources]
        if len(set(names)) != len(names):
            raise ValueError("duplicate source names")

    @property
    def cycle_seconds(self) -> int:
        return self.cycle_minutes * 60

    @classmethod
    def from_text(cls, text: str, base_dir=".", env=None) -> "ScheduleConfig":
        """Parse ``key = value`` settings; ``source.<name> = <kind> <location>`` per source.

        Relative paths are resolved against ``base_dir``. The output directory
        can be overridden with the ``HELIOFORGE_OUTPUT_DIR`` variable.
        """
        env = os.environ if env is None else env
        base = Path(base_dir)
        kw: dict = {}
        sources = []
        ints = {"cycle_minutes", "lead_seconds", "retention_days", "history_days", "max_gap"}
        paths = {"output_dir", "database", "predictor_store"}
        for key, value in flatfile.loads(text):
            if key.startswith("source."):
                kind, _, loc = value.partition(" ")
                loc = loc.strip()
                if not loc:
                    raise ValueError(f"{key}: expected '<kind> <location>'")
                if "://" not in loc:
                    loc = str(base / loc)
                sources.append(Source(key[len("source."):], kind, loc))
            elif key in ints:
                kw[key] = int(value)
            elif key == "timeout_seconds":
                kw[key] = float(value)
            elif key in paths:
                kw[key] = base / value
            else:
                raise ValueError(f"unknown setting {key!r}")
        if env.get(OUTPUT_ENV):
            kw["output_dir"] = Path(env[OUTPUT_ENV])
        return cls(sources=tuple(sources), **kw)

    @classmethod
    def load(cls, path, env=None) -> "ScheduleConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), path.parent, env)


def _seconds(ts) -> int:
    return int(to_datetime64(ts).astype(np.int64))


def _stamp(sec: int) -> np.datetime64:
    return np.datetime64(int(sec), "s")


def cycle_origin(now, cycle_seconds: int = 900, lead_seconds: int = 60) -> np.datetime64:
    """First boundary at or after ``now + lead``: the origin a cycle at ``now`` serves."""
    t = _seconds(now) + lead_seconds
    return _stamp(-(-t // cycle_seconds) * cycle_seconds)


# ---------------------------------------------------------------- storage

_SCHEMA = """
CREATE TABLE IF NOT EXISTS raw_sr (source TEXT, ts INTEGER, value REAL, PRIMARY KEY (source, ts));
CREATE TABLE IF NOT EXISTS raw_gp (source TEXT, ts INTEGER, value REAL, PRIMARY KEY (source, ts));
CREATE TABLE IF NOT EXISTS raw_service (
    source TEXT, issued INTEGER, lead INTEGER, step INTEGER, value REAL, PRIMARY KEY (source, issued, lead));
CREATE TABLE IF NOT EXISTS clean_15min (ts INTEGER PRIMARY KEY, sr REAL, gp REAL, sr_flag INTEGER, gp_flag INTEGER);
CREATE TABLE IF NOT EXISTS predictions (
    origin INTEGER, lead_step INTEGER, sr_pred REAL, gp_pred REAL, degraded INTEGER, PRIMARY KEY (origin, lead_step));
"""
_RAW_TABLE = {"sr": "raw_sr", "gp": "raw_gp"}


class Store:
    """The five state tables in one SQLite file. Only the scheduler thread writes."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.db = sqlite3.connect(str(self.path))
            self.db.executescript(_SCHEMA)
        except (OSError, sqlite3.Error) as exc:
            raise StorageError(f"cannot open {self.path}: {exc}") from exc

    def close(self) -> None:
        self.db.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _write(self, sql: str, rows) -> int:
        try:
            with self.db:
                before = self.db.total_changes
                self.db.executemany(sql, rows)
                return self.db.total_changes - before
        except sqlite3.Error as exc:
            raise StorageError(str(exc)) from exc

    def insert(self, source: Source, records) -> int:
        """Insert raw records, ignoring any (source, timestamp) already present."""
        if source.kind == "service_forecast":
            return self._write(
                "INSERT OR IGNORE INTO raw_service VALUES (?, ?, ?, ?, ?)",
                [(source.name, *r) for r in records],
            )
        table = _RAW_TABLE[source.kind]
        return self._write(f"INSERT OR IGNORE INTO {table} VALUES (?, ?, ?)", [(source.name, *r) for r in records])

    def latest(self, source: Source) -> int | None:
        if source.kind == "service_forecast":
            sql = "SELECT MAX(issued) FROM raw_service WHERE source = ?"
        else:
            sql = f"SELECT MAX(ts) FROM {_RAW_TABLE[source.kind]} WHERE source = ?"
        return self.db.execute(sql, (source.name,)).fetchone()[0]

    def raw(self, kind: str, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        """Timestamps and values in ``[lo, hi)``; several sources of one kind are averaged."""
        rows = self.db.execute(
            f"SELECT ts, AVG(value) FROM {_RAW_TABLE[kind]} WHERE ts >= ? AND ts < ? GROUP BY ts ORDER BY ts", (lo, hi)
        ).fetchall()
        if not rows:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        ts, v = zip(*rows)
        return np.array(ts, dtype=np.int64), np.array([np.nan if x is None else x for x in v], dtype=float)

    def service_issues(self, lo: int, hi: int) -> ForecastMatrix | None:
        """Service issues with ``lo <= issued <= hi`` sharing the latest issue's step."""
        rows = self.db.execute(
            "SELECT issued, lead, step, AVG(value) FROM raw_service WHERE issued >= ? AND issued <= ? "
            "GROUP BY issued, lead ORDER BY issued, lead",
            (lo, hi),
        ).fetchall()
        if not rows:
            return None
        step = rows[-1][2]
        rows = [r for r in rows if r[2] == step]
        issued = sorted({r[0] for r in rows})
        horizon = max(r[1] for r in rows)
        pos = {t: i for i, t in enumerate(issued)}
        values = np.full((len(issued), horizon), np.nan)
        for t, lead, _, v in rows:
            values[pos[t], lead - 1] = np.nan if v is None else v
        return ForecastMatrix(np.array([_stamp(t) for t in issued]), values, step, "service")

    def save_clean(self, sr: TimeSeries, gp: TimeSeries) -> None:
        start = _seconds(sr.start_time)
        rows = [
            (start + i * sr.step, _num(sr.values[i]), _num(gp.values[i]), int(sr.flags[i]), int(gp.flags[i]))
            for i in range(len(sr))
        ]
        self._write("INSERT OR REPLACE INTO clean_15min VALUES (?, ?, ?, ?, ?)", rows)

    def save_predictions(self, origin: int, sr: np.ndarray, gp: np.ndarray, degraded: int) -> None:
        rows = [(origin, h + 1, _num(sr[h]), _num(gp[h]), degraded) for h in range(len(sr))]
        self._write("INSERT OR REPLACE INTO predictions VALUES (?, ?, ?, ?, ?)", rows)

    def last_origin(self) -> int | None:
        return self.db.execute("SELECT MAX(origin) FROM predictions").fetchone()[0]

    def prune(self, cutoff: int) -> None:
        """Drop rows older than ``cutoff`` (epoch seconds)."""
        self._write("DELETE FROM raw_sr WHERE ts < ?", [(cutoff,)])
        self._write("DELETE FROM raw_gp WHERE ts < ?", [(cutoff,)])
        self._write("DELETE FROM raw_service WHERE issued < ?", [(cutoff,)])
        self._write("DELETE FROM clean_15min WHERE ts < ?", [(cutoff,)])
        self._write("DELETE FROM predictions WHERE origin < ?", [(cutoff,)])


def _num(x) -> float | None:
    return None if np.isnan(x) else float(x)


# ---------------------------------------------------------------- polling


def _read_text(location: str, timeout: float) -> list[tuple[str, str]]:
    """``(name, csv text)`` for a URL, a file, or every ``*.csv`` in a directory."""
    if "://" in location:
        with urllib.request.urlopen(location, timeout=timeout) as resp:
            return [(location, resp.read().decode("utf-8"))]
    path = Path(location)
    if path.is_dir():
        return [(str(p), p.read_text()) for p in sorted(path.glob("*.csv"))]
    if path.is_file():
        return [(str(path), path.read_text())]
    raise FileNotFoundError(f"source not found: {location}")


def parse_records(kind: str, text: str) -> list[tuple]:
    """Rows of a source file as ``(ts, value)`` or ``(issued, lead, step, value)``."""
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        raw = (row.get("value") or "").strip()
        value = float(raw) if raw and raw.lower() != "nan" else None
        if kind == "service_forecast":
            out.append((_seconds(row["origin"]), int(row["lead"]), int(row.get("step") or 10800), value))
        else:
            if (row.get("flag") or "").strip().lower() in ("missing", "outlier"):
                value = None
            out.append((_seconds(row["timestamp"]), value))
    return out


@dataclass
class PollResult:
    source: Source
    records: list = field(default_factory=list)
    error: str | None = None


def _poll_one(source: Source, since: int | None, timeout: float) -> PollResult:
    records = []
    for _, text in _read_text(source.location, timeout):
        records.extend(parse_records(source.kind, text))
    if since is not None:
        records = [r for r in records if r[0] > since]
    return PollResult(source, records)


def poll_sources(config: ScheduleConfig, since=None) -> list[PollResult]:
    """Read every source concurrently, keeping records newer than ``since``.

    ``since`` is one timestamp for all sources or a dict by source name. A
    source that fails or does not answer within the timeout is reported
    with ``error`` set and contributes nothing this time.
    """
    def since_of(src):
        s = since.get(src.name) if isinstance(since, dict) else since
        return None if s is None else (s if isinstance(s, (int, np.integer)) else _seconds(s))

    if not config.sources:
        return []
    pool = cf.ThreadPoolExecutor(max_workers=len(config.sources))
    futures = {pool.submit(_poll_one, s, since_of(s), config.timeout_seconds): s for s in config.sources}
    done, _ = cf.wait(futures, timeout=config.timeout_seconds)
    pool.shutdown(wait=False, cancel_futures=True)
    results = []
    for fut, src in futures.items():
        if fut not in done:
            log.warning("source %s timed out after %gs", src.name, config.timeout_seconds)
            results.append(PollResult(src, error="timeout"))
            continue
        try:
            results.append(fut.result())
        except Exception as exc:  # unreachable or malformed source: keep going with stale data
            log.warning("source %s unavailable: %s", src.name, exc)
            results.append(PollResult(src, error=str(exc)))
    return results


def ingest(store: Store, results) -> dict[str, int]:
    """Write poll results (single writer); returns rows inserted per source."""
    return {r.source.name: store.insert(r.source, r.records) for r in results if r.records}


# ---------------------------------------------------------------- prediction cycle


@dataclass
class CycleResult:
    origin: np.datetime64
    sr: np.ndarray
    gp: np.ndarray
    degraded: int
    path: Path | None = None


def _trailing_missing(x: np.ndarray) -> int:
    ok = np.flatnonzero(~np.isnan(x))
    return len(x) if not len(ok) else len(x) - 1 - int(ok[-1])


def _measured(store: Store, kind: str, lo: int, hi: int) -> TimeSeries | None:
    ts, v = store.raw(kind, lo, hi)
    if len(ts) < 2:
        return None
    try:
        return series_from_records(ts.astype("datetime64[s]"), v, source=f"raw_{kind}")
    except ValueError as exc:
        log.warning("raw %s unusable: %s", kind, exc)
        return None


def clean_window(store: Store, origin: int, n: int, max_gap: int) -> tuple[TimeSeries, TimeSeries]:
    """Cleaned SR and GP on the 15-min grid for the ``n`` steps before ``origin``."""
    lo = origin - n * GRID_STEP
    start = _stamp(lo)
    sr_raw, gp_raw = _measured(store, "sr", lo, origin), _measured(store, "gp", lo, origin)
    empty = TimeSeries(start, GRID_STEP, np.full(n, np.nan))
    if sr_raw is not None and gp_raw is not None:
        gp_c, sr_c = cleaning.clean_pair(gp_raw, sr_raw, max_gap=max_gap)
    else:
        sr_c = cleaning.clean_series(sr_raw, max_gap=max_gap) if sr_raw is not None else empty
        gp_c = cleaning.clean_series(gp_raw, max_gap=max_gap) if gp_raw is not None else empty
    return cleaning.align(sr_c, start, n), cleaning.align(gp_c, start, n)


def nowcast_fill(series: TimeSeries, model, max_gap: int) -> TimeSeries:
    """Fill a short trailing gap with the model's own forecast from its start.

    At fire time the interval ending at the origin is not yet measured, so
    the newest sample is usually missing. Gaps longer than ``max_gap`` are
    left alone; those take the persistence path.
    """
    k = _trailing_missing(series.usable())
    if k == 0 or k > max_gap or k == len(series):
        return series
    n = len(series)
    guess = arimodels.forecast_matrix(model, series, np.array([n - k]), k).values[0]
    values, flags = series.values.copy(), series.flags.copy()
    ok = ~np.isnan(guess)
    values[n - k:][ok] = guess[ok]
    flags[n - k:][ok] = Flag.INTERPOLATED
    return series.replace(values, flags)


def stale_history(sr: TimeSeries, gp: TimeSeries, max_gap: int) -> bool:
    return max(_trailing_missing(sr.usable()), _trailing_missing(gp.usable())) > max_gap


def _extend(series: TimeSeries, extra: int) -> TimeSeries:
    return cleaning.align(series, series.start_time, len(series) + extra)


def run_cycle(now, store: Store, predictors: Predictors, config: ScheduleConfig, source_errors: bool = False) -> CycleResult:
    """Clean, gate, predict and combine for the origin served at ``now``.

    Uses only stored data strictly before the origin, so the result depends
    on the stored state and ``now`` alone.
    """
    origin_t = cycle_origin(now, config.cycle_seconds, config.lead_seconds)
    origin = _seconds(origin_t)
    H = HORIZON
    n = config.history_days * 96
    sr_hist, gp_hist = clean_window(store, origin, n, config.max_gap)
    store.save_clean(sr_hist, gp_hist)
    if not stale_history(sr_hist, gp_hist, config.max_gap):
        sr_hist = nowcast_fill(sr_hist, predictors.sr_long, config.max_gap)
        gp_hist = nowcast_fill(gp_hist, predictors.gp_ari, config.max_gap)
    sr, gp = _extend(sr_hist, H), _extend(gp_hist, H)
    origins = np.array([n])
    degraded = DEGRADED_SOURCE if source_errors else 0

    stale = stale_history(sr_hist, gp_hist, config.max_gap)
    issues = store.service_issues(origin - 2 * 86400, origin)
    service = service_on_grid(issues, sr, origins, H, "SR-2") if issues is not None else None
    if stale:
        degraded |= DEGRADED_PERSISTENCE
        sr_pred = arimodels.persistence_matrix(sr, origins, H).values[0]
        gp_pred = arimodels.persistence_matrix(gp, origins, H).values[0]
    elif service is None or np.isnan(service.values).any():
        degraded |= DEGRADED_NO_SERVICE
        sr_pred = arimodels.forecast_matrix(predictors.sr_long, sr, origins, H).values[0]
        gp_pred = arimodels.forecast_matrix(predictors.gp_ari, gp, origins, H).values[0]
    else:
        m = {
            "SR-2": service,
            "SR-ARI-long": arimodels.forecast_matrix(predictors.sr_long, sr, origins, H, predictor_id="SR-ARI-long"),
            "SR-ARI-short": arimodels.forecast_matrix(predictors.sr_short, sr, origins, H, predictor_id="SR-ARI-short"),
        }
        members = [m[k] for k in SR_MEMBERS]
        feats = gate.feature_cube(service, sr)
        m["SR-5"], _ = ensemble.gated_combine(predictors.gate, predictors.es1, predictors.es2, members, feats, "SR-5")
        gp_exo = predictors.meta.get("gp_exo", "SR-5")
        g = gp_forecasts(predictors, sr, gp, m, origins, H, gp_exo if gp_exo in m else "SR-5")
        sr_pred, gp_pred = m["SR-5"].values[0], g["GP-4"].values[0]

    sr_pred, gp_pred = np.asarray(sr_pred, dtype=float), np.asarray(gp_pred, dtype=float)
    store.save_predictions(origin, sr_pred, gp_pred, degraded)
    path = write_prediction_file(config.output_dir, origin_t, sr_pred, gp_pred, degraded)
    return CycleResult(origin_t, sr_pred, gp_pred, degraded, path)


def prediction_filename(origin) -> str:
    return "prediction_" + format_timestamp(to_datetime64(origin)).replace("-", "").replace(":", "") + ".csv"


def _cell(x: float) -> str:
    return "" if np.isnan(x) else f"{x:.6f}"


def write_prediction_file(out_dir, origin, sr_pred, gp_pred, degraded: int) -> Path:
    """One CSV per origin, written to a temp file and renamed into place."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["origin", "lead_step", "sr_pred", "gp_pred", "degraded_flag"])
    stamp = format_timestamp(to_datetime64(origin))
    for h in range(len(sr_pred)):
        w.writerow([stamp, h + 1, _cell(sr_pred[h]), _cell(gp_pred[h]), degraded])
    path = Path(out_dir) / prediction_filename(origin)
    flatfile.atomic_write(path, buf.getvalue())
    return path


# ---------------------------------------------------------------- scheduler


class SystemClock:
    def now(self) -> np.datetime64:
        return np.datetime64(int(time.time()), "s")

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class ManualClock:
    """Clock for replays and tests: ``sleep`` advances time instantly."""

    def __init__(self, start):
        self.t = _seconds(start)

    def now(self) -> np.datetime64:
        return _stamp(self.t)

    def sleep(self, seconds: float) -> None:
        self.t += int(np.ceil(seconds))

    def set(self, when) -> None:
        self.t = _seconds(when)


def _store_signature(directory) -> tuple:
    d = Path(directory)
    if not d.is_dir():
        return ()
    return tuple(sorted((p.name, p.stat().st_mtime_ns, p.stat().st_size) for p in d.iterdir() if p.is_file()))


class Service:
    """Owns the store and the loaded predictors and runs cycles on a clock."""

    def __init__(self, config: ScheduleConfig, clock=None, predictors: Predictors | None = None):
        self.config = config
        self.clock = clock or SystemClock()
        self.store = Store(config.database)
        self._signature = None
        self.predictors = predictors
        if predictors is None:
            self.reload()
        self.last_origin: int | None = self.store.last_origin()  # survives restarts

    def close(self) -> None:
        self.store.close()

    def reload(self, force: bool = False) -> bool:
        """Load the predictor store again if its files changed; keeps the old models on failure."""
        sig = _store_signature(self.config.predictor_store)
        if not force and sig == self._signature and self.predictors is not None:
            return False
        try:
            self.predictors = Predictors.load(self.config.predictor_store)
        except (OSError, ValueError, KeyError) as exc:
            if self.predictors is None:
                raise
            log.error("predictor store reload failed, keeping previous models: %s", exc)
            return False
        self._signature = sig
        log.info("loaded predictor store %s", self.config.predictor_store)
        return True

    def poll(self) -> bool:
        """Poll and ingest; True when some source failed."""
        since = {s.name: self.store.latest(s) for s in self.config.sources}
        results = poll_sources(self.config, since)
        counts = ingest(self.store, results)
        if counts:
            log.info("ingested %s", ", ".join(f"{k}={v}" for k, v in counts.items()))
        return any(r.error for r in results)

    def step(self, now=None) -> CycleResult:
        now = self.clock.now() if now is None else now
        if self.config.predictor_store and self._signature is not None:
            self.reload()
        failed = self.poll()
        result = run_cycle(now, self.store, self.predictors, self.config, failed)
        self.last_origin = _seconds(result.origin)
        self.store.prune(self.last_origin - self.config.retention_days * 86400)
        log.info("cycle %s written (degraded=%d)", format_timestamp(result.origin), result.degraded)
        return result

    def next_fire(self) -> int:
        """Epoch seconds of the next cycle, never serving an origin twice."""
        cyc, lead = self.config.cycle_seconds, self.config.lead_seconds
        origin = _seconds(cycle_origin(self.clock.now(), cyc, lead))
        if self.last_origin is not None and origin <= self.last_origin:
            origin = self.last_origin + cyc
        return origin - lead

    def serve(self, max_cycles: int | None = None, stop=None) -> int:
        """Sleep until each lead-adjusted boundary and run a cycle; returns cycles run."""
        done = 0
        while max_cycles is None or done < max_cycles:
            if stop is not None and stop():
                break
            fire = self.next_fire()
            self.clock.sleep(fire - _seconds(self.clock.now()))
            self.step(_stamp(fire))
            done += 1
        return done
