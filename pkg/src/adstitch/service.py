"""Serving endpoint: in-process request API, line-delimited network mode and config loading."""

from __future__ import annotations

import dataclasses
import json
import os
import signal
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Mapping

import numpy as np

from .core import AssetCatalog, NotFoundError, Query, StitchedAd, SystemConfig, ValidationError
from .stitcher import Mode, Models, NoAdError, PreparedPools, Stitcher, fresh_models, load_models

ENV_PREFIX = "ADSTITCH_"
PATH_KEYS = ("pages", "assets", "rules", "checkpoint", "world")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _coerce(name: str, raw: str, typ) -> object:
    typ = str(typ)
    try:
        if typ == "bool":
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ.startswith("tuple"):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw.strip()
    except ValueError:
        raise ValidationError(f"config key {name!r}: cannot parse {raw!r} as {typ}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment line."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class ServiceConfig:
    system: SystemConfig
    paths: dict

    def path(self, key: str) -> Path | None:
        value = self.paths.get(key)
        return Path(value) if value else None


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None,
                overrides: Mapping[str, object] | None = None) -> ServiceConfig:
    """Merge, in increasing precedence: defaults, config file, ``ADSTITCH_*``
    environment variables, explicit overrides."""
    env = os.environ if env is None else env
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    fields = {f.name: f.type for f in dataclasses.fields(SystemConfig)}
    for key in list(fields) + list(PATH_KEYS):
        value = env.get(ENV_PREFIX + key.upper())
        if value is not None:
            raw[key] = value
    unknown = set(raw) - set(fields) - set(PATH_KEYS)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values = {k: _coerce(k, v, fields[k]) for k, v in raw.items() if k in fields}
    paths = {k: v for k, v in raw.items() if k in PATH_KEYS}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k in fields:
            values[k] = v
        elif k in PATH_KEYS:
            paths[k] = str(v)
        else:
            raise ValidationError(f"unknown config key {k!r}")
    return ServiceConfig(SystemConfig(**values), paths)


# --------------------------------------------------------------------------
# requests
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ServeRequest:
    page_url: str
    query: str
    mode: Mode = Mode.EXPLOIT
    request_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))

    @classmethod
    def from_record(cls, rec: Mapping) -> "ServeRequest":
        try:
            return cls(page_url=rec["page_url"], query=rec.get("query", ""),
                       mode=Mode(rec.get("mode", "Exploit")), request_id=str(rec.get("request_id", "")))
        except KeyError as exc:
            raise ValidationError(f"request missing field {exc.args[0]}") from None


@dataclass(frozen=True)
class ServeResponse:
    request_id: str
    ad: StitchedAd
    scores: tuple[float, ...]
    latency_micros: int

    def to_record(self, include_latency: bool = True) -> dict:
        rec = {"request_id": self.request_id, "ad": self.ad.to_record(), "scores": list(self.scores)}
        if include_latency:
            rec["latency_micros"] = self.latency_micros
        return rec


class _Snapshot:
    """Immutable serving state; replaced wholesale on reload."""

    def __init__(self, models: Models, catalog: AssetCatalog, trial_scale: float):
        self.stitcher = Stitcher(models, trial_scale=trial_scale)
        self.pools: dict[str, PreparedPools | None] = {}
        for url in catalog:
            entry = catalog[url]
            self.pools[url] = (PreparedPools(entry.titles, entry.descriptions)
                               if entry.titles and entry.descriptions else None)


class AdServer:
    """Stitches ads against a read-only model snapshot.

    :meth:`reload` builds a new snapshot and swaps it in with one reference
    assignment, so concurrent requests see either the old or the new models.
    Explore-mode requests draw from one service-level generator seeded by
    ``config.rng_seed``, which makes them reproducible for a fixed request order.
    """

    def __init__(self, catalog: AssetCatalog, models: Models | None = None,
                 config: SystemConfig | None = None, checkpoint: str | Path | None = None):
        self.config = config or SystemConfig()
        self.catalog = catalog
        self.checkpoint = Path(checkpoint) if checkpoint else None
        if models is None:
            models = load_models(self.checkpoint) if self.checkpoint else fresh_models(self.config.hash_bits)
        self._snapshot = _Snapshot(models, catalog, self.config.trial_scale)
        self._rng = np.random.default_rng(self.config.rng_seed)
        self._rng_lock = threading.Lock()

    @property
    def models(self) -> Models:
        return self._snapshot.stitcher.models

    def reload(self, models: Models | None = None) -> None:
        if models is None:
            if self.checkpoint is None:
                raise ValidationError("no checkpoint path to reload from")
            models = load_models(self.checkpoint)
        self._snapshot = _Snapshot(models, self.catalog, self.config.trial_scale)

    def serve(self, req: ServeRequest) -> ServeResponse:
        start = time.perf_counter_ns()
        snap = self._snapshot
        if req.page_url not in snap.pools:
            raise NotFoundError(f"unknown page_url {req.page_url}")
        pools = snap.pools[req.page_url]
        if pools is None:
            raise NoAdError(f"empty title or description pool for {req.page_url}")
        query = Query(req.query)
        if req.mode is Mode.EXPLORE:
            with self._rng_lock:
                ad = snap.stitcher.stitch_pools(query, pools, Mode.EXPLORE, self._rng)
        else:
            ad = snap.stitcher.stitch_pools(query, pools, Mode.EXPLOIT, None)
        micros = (time.perf_counter_ns() - start) // 1000
        return ServeResponse(req.request_id, ad, ad.scores, int(micros))

    def handle_line(self, line: str, include_latency: bool = True) -> str:
        """One request record in, one response (or error) record out."""
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValidationError("request is not an object")
            resp = self.serve(ServeRequest.from_record(rec))
            out = resp.to_record(include_latency)
        except json.JSONDecodeError as exc:
            out = {"error": "ValidationError", "message": f"malformed request ({exc.msg})"}
        except (ValidationError, NotFoundError, ValueError) as exc:
            out = {"request_id": rec.get("request_id", "") if isinstance(rec, dict) else "",
                   "error": type(exc).__name__, "message": str(exc)}
        return json.dumps(out, sort_keys=True, ensure_ascii=False)

    def serve_stream(self, src: IO[str], dst: IO[str], include_latency: bool = True) -> int:
        n = 0
        for line in src:
            if not line.strip():
                continue
            dst.write(self.handle_line(line, include_latency) + "\n")
            dst.flush()
            n += 1
        return n


# --------------------------------------------------------------------------
# network mode
# --------------------------------------------------------------------------

class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        server: AdServer = self.server.ad_server
        for raw in self.rfile:
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            self.wfile.write((server.handle_line(line) + "\n").encode("utf-8"))


class LineServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], ad_server: AdServer):
        super().__init__(address, _LineHandler)
        self.ad_server = ad_server


def run_network(ad_server: AdServer, host: str = "127.0.0.1", port: int = 8765,
                ready: threading.Event | None = None) -> None:
    """Serve line-delimited requests over TCP until interrupted.

    SIGHUP reloads the checkpoint (where the platform has it).
    """
    with LineServer((host, port), ad_server) as srv:
        if hasattr(signal, "SIGHUP") and threading.current_thread() is threading.main_thread():
            signal.signal(signal.SIGHUP, lambda *_: ad_server.reload())
        if ready is not None:
            ready.set()
        try:
            srv.serve_forever()
        except KeyboardInterrupt:
            pass
