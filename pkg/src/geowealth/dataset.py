"""Data model and I/O for survey clusters, settlements, and embeddings,
plus a synthetic world generator for desk-scale end-to-end runs.

File formats
------------
clusters CSV      header ``survey_id,cluster_id,lat,lon,urban,iwi`` (urban in {0,1})
settlements CSV   header ``settlement_id,lat,lon``
embeddings CSV    header ``key,e0,...,e63``
embeddings binary magic ``AEEMB001``, u32 LE count, u32 LE dim, a key table
                  (u16 LE byte-length + UTF-8 bytes per key), then
                  count*dim f32 LE values row-major
truth CSV         header ``key,lat,lon,true_wealth`` (synthetic oracle data)

All CSV numbers are written with full f64 round-trip precision. Embeddings
are stored as f32 on disk and widened to f64 in memory.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .displacement import ClusterType, DisplacementModel, displace
from .geo import GeoPoint, destination, haversine_km

EMBEDDING_DIM = 64
EMBEDDING_MAGIC = b"AEEMB001"


class DatasetError(ValueError):
    """Malformed or inconsistent input data."""


class MissingEmbeddingError(KeyError):
    """A node key was referenced that has no embedding row."""

    def __init__(self, key: str):
        super().__init__(f"missing embedding for key '{key}'")
        self.key = key


@dataclass(frozen=True)
class SurveyCluster:
    """One surveyed cluster: a reported (displaced) coordinate plus its
    aggregate wealth index in [0, 100]."""

    survey_id: str
    cluster_id: str
    reported: GeoPoint
    kind: ClusterType
    iwi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.iwi) and 0.0 <= self.iwi <= 100.0):
            raise DatasetError(
                f"iwi {self.iwi} outside [0, 100] for cluster "
                f"{self.survey_id}:{self.cluster_id}"
            )

    @property
    def key(self) -> str:
        return f"{self.survey_id}:{self.cluster_id}"


@dataclass(frozen=True)
class Settlement:
    """A known (unlabeled) populated place."""

    settlement_id: str
    location: GeoPoint


class EmbeddingTable:
    """Fixed-dimension per-key feature vectors, keyed by node key."""

    def __init__(self, dim: int = EMBEDDING_DIM):
        if dim < 1:
            raise DatasetError(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim
        self._rows: dict[str, np.ndarray] = {}

    def add(self, key: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DatasetError(
                f"embedding for '{key}' has {vec.size} values, expected {self.dim}"
            )
        if not np.all(np.isfinite(vec)):
            raise DatasetError(f"embedding for '{key}' contains non-finite values")
        if key in self._rows:
            raise DatasetError(f"duplicate embedding key '{key}'")
        self._rows[key] = vec

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self._rows[key]
        except KeyError:
            raise MissingEmbeddingError(key) from None

    def __contains__(self, key: str) -> bool:
        return key in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def keys(self):
        return self._rows.keys()


def _parse_float(text: str, what: str, path: str, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"{path}:{line_no}: malformed {what} value {text!r}") from None


def _check_header(row: list[str] | None, expected: list[str], path: str) -> None:
    if row != expected:
        raise DatasetError(f"{path}:1: expected header {','.join(expected)!r}, got {row!r}")


def load_clusters(path: str) -> list[SurveyCluster]:
    """Read a clusters CSV; raises :class:`DatasetError` with the line number
    for malformed rows, out-of-range values, or duplicate keys."""
    out: list[SurveyCluster] = []
    seen: set[tuple[str, str]] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), ["survey_id", "cluster_id", "lat", "lon", "urban", "iwi"], path)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise DatasetError(f"{path}:{line_no}: expected 6 fields, got {len(row)}")
            survey_id, cluster_id, lat_s, lon_s, urban_s, iwi_s = row
            lat = _parse_float(lat_s, "lat", path, line_no)
            lon = _parse_float(lon_s, "lon", path, line_no)
            if urban_s not in ("0", "1"):
                raise DatasetError(f"{path}:{line_no}: urban must be 0 or 1, got {urban_s!r}")
            iwi = _parse_float(iwi_s, "iwi", path, line_no)
            if (survey_id, cluster_id) in seen:
                raise DatasetError(f"{path}:{line_no}: duplicate cluster {survey_id}:{cluster_id}")
            seen.add((survey_id, cluster_id))
            try:
                cluster = SurveyCluster(
                    survey_id=survey_id,
                    cluster_id=cluster_id,
                    reported=GeoPoint(lat, lon),
                    kind=ClusterType.URBAN if urban_s == "1" else ClusterType.RURAL,
                    iwi=iwi,
                )
            except ValueError as exc:
                raise DatasetError(f"{path}:{line_no}: {exc}") from None
            out.append(cluster)
    return out


def save_clusters(path: str, clusters: list[SurveyCluster]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["survey_id", "cluster_id", "lat", "lon", "urban", "iwi"])
        for c in clusters:
            writer.writerow(
                [
                    c.survey_id,
                    c.cluster_id,
                    repr(c.reported.lat),
                    repr(c.reported.lon),
                    "1" if c.kind is ClusterType.URBAN else "0",
                    repr(c.iwi),
                ]
            )


def load_settlements(path: str) -> list[Settlement]:
    out: list[Settlement] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), ["settlement_id", "lat", "lon"], path)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DatasetError(f"{path}:{line_no}: expected 3 fields, got {len(row)}")
            sid, lat_s, lon_s = row
            if sid in seen:
                raise DatasetError(f"{path}:{line_no}: duplicate settlement_id {sid!r}")
            seen.add(sid)
            try:
                loc = GeoPoint(_parse_float(lat_s, "lat", path, line_no), _parse_float(lon_s, "lon", path, line_no))
            except ValueError as exc:
                raise DatasetError(f"{path}:{line_no}: {exc}") from None
            out.append(Settlement(settlement_id=sid, location=loc))
    return out


def save_settlements(path: str, settlements: list[Settlement]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["settlement_id", "lat", "lon"])
        for s in settlements:
            writer.writerow([s.settlement_id, repr(s.location.lat), repr(s.location.lon)])


def load_embeddings(path: str, expect_dim: int | None = EMBEDDING_DIM) -> EmbeddingTable:
    """Load an embedding table, sniffing binary vs CSV by the magic bytes.

    `expect_dim` rejects tables of any other dimension; pass None to accept
    whatever the file declares.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(EMBEDDING_MAGIC))
    if magic == EMBEDDING_MAGIC:
        return _load_embeddings_binary(path, expect_dim)
    return _load_embeddings_csv(path, expect_dim)


def _check_dim(dim: int, expect_dim: int | None, path: str) -> None:
    if expect_dim is not None and dim != expect_dim:
        raise DatasetError(f"{path}: embedding dim {dim} != expected {expect_dim}")


def _load_embeddings_csv(path: str, expect_dim: int | None) -> EmbeddingTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "key" or len(header) < 2:
            raise DatasetError(f"{path}:1: expected header 'key,e0,...', got {header!r}")
        dim = len(header) - 1
        if header != ["key"] + [f"e{i}" for i in range(dim)]:
            raise DatasetError(f"{path}:1: malformed embedding header")
        _check_dim(dim, expect_dim, path)
        table = EmbeddingTable(dim=dim)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DatasetError(
                    f"{path}:{line_no}: expected {dim} values for key {row[0]!r}, got {len(row) - 1}"
                )
            values = [_parse_float(v, "embedding", path, line_no) for v in row[1:]]
            try:
                table.add(row[0], np.array(values))
            except DatasetError as exc:
                raise DatasetError(f"{path}:{line_no}: {exc}") from None
    return table


def save_embeddings_csv(path: str, table: EmbeddingTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key"] + [f"e{i}" for i in range(table.dim)])
        for key in table.keys():
            writer.writerow([key] + [repr(float(v)) for v in table[key]])


def _load_embeddings_binary(path: str, expect_dim: int | None) -> EmbeddingTable:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise DatasetError(f"{path}: bad magic, not an embedding file")
    off = len(EMBEDDING_MAGIC)
    try:
        count, dim = struct.unpack_from("<II", data, off)
        off += 8
        keys = []
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, off)
            off += 2
            keys.append(data[off : off + klen].decode("utf-8"))
            off += klen
        values = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off)
        off += 4 * count * dim
    except (struct.error, ValueError) as exc:
        raise DatasetError(f"{path}: truncated embedding file ({exc})") from None
    if off != len(data):
        raise DatasetError(f"{path}: {len(data) - off} trailing bytes")
    _check_dim(dim, expect_dim, path)
    table = EmbeddingTable(dim=dim)
    matrix = values.astype(np.float64).reshape(count, dim)
    for i, key in enumerate(keys):
        table.add(key, matrix[i])
    return table


def save_embeddings_binary(path: str, table: EmbeddingTable) -> None:
    keys = list(table.keys())
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", len(keys), table.dim))
        for key in keys:
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DatasetError(f"key too long to encode: {key[:40]!r}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        for key in keys:
            fh.write(table[key].astype("<f4").tobytes())


@dataclass(frozen=True)
class TruthRow:
    """Oracle record: the true location and true wealth-field value of a key."""

    key: str
    location: GeoPoint
    true_wealth: float


def load_truth(path: str) -> list[TruthRow]:
    out: list[TruthRow] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), ["key", "lat", "lon", "true_wealth"], path)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DatasetError(f"{path}:{line_no}: expected 4 fields, got {len(row)}")
            out.append(
                TruthRow(
                    key=row[0],
                    location=GeoPoint(
                        _parse_float(row[1], "lat", path, line_no),
                        _parse_float(row[2], "lon", path, line_no),
                    ),
                    true_wealth=_parse_float(row[3], "true_wealth", path, line_no),
                )
            )
    return out


def save_truth(path: str, rows: list[TruthRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "lat", "lon", "true_wealth"])
        for r in rows:
            writer.writerow([r.key, repr(r.location.lat), repr(r.location.lon), repr(r.true_wealth)])


# --------------------------------------------------------------------------
# Synthetic world
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Parameters of the generated world.

    The wealth surface is a sum of Gaussian bumps around `n_centers` random
    centers; settlements cluster around the same centers; clusters are
    settlements sampled without replacement, labeled from the surface, and
    re-reported through the displacement mechanism. `settlement_dropout`
    removes a fraction of settlements after cluster placement, so some
    clusters lose their true location from the candidate set (the phantom
    condition). `n_surveys` partitions clusters into longitude bands that
    play the role of separate surveys for cross-validation.
    """

    n_centers: int = 8
    n_settlements: int = 2000
    n_clusters: int = 400
    bbox: tuple[float, float, float, float] = (-2.5, 2.5, 30.0, 35.0)  # lat_min, lat_max, lon_min, lon_max
    center_sigma_km: float = 45.0
    embed_noise_sigma: float = 0.05
    label_noise_sigma: float = 2.0
    urban_fraction: float = 0.3
    seed: int = 0
    n_surveys: int = 10
    settlement_dropout: float = 0.0

    def __post_init__(self) -> None:
        lat_min, lat_max, lon_min, lon_max = self.bbox
        if min(self.n_centers, self.n_settlements, self.n_clusters, self.n_surveys) < 1:
            raise DatasetError("counts must all be >= 1")
        if not (lat_min < lat_max and lon_min < lon_max):
            raise DatasetError(f"degenerate bbox {self.bbox}")
        if not (-89.0 <= lat_min and lat_max <= 89.0):
            raise DatasetError("bbox latitudes must stay within [-89, 89]")
        if self.center_sigma_km <= 0:
            raise DatasetError("center_sigma_km must be positive")
        if self.embed_noise_sigma < 0 or self.label_noise_sigma < 0:
            raise DatasetError("noise sigmas must be non-negative")
        if not 0.0 <= self.urban_fraction <= 1.0:
            raise DatasetError("urban_fraction must be in [0, 1]")
        if not 0.0 <= self.settlement_dropout < 1.0:
            raise DatasetError("settlement_dropout must be in [0, 1)")


@dataclass
class SyntheticWorld:
    """Everything :func:`generate_synthetic` produces.

    `clusters_true` and `clusters_reported` are index-aligned; the former
    carries the true settlement coordinate in the coordinate slot, the
    latter the displaced one. The embedding table covers every surviving
    settlement plus every cluster's reported coordinate (keyed by
    ``survey_id:cluster_id``).
    """

    settlements: list[Settlement]
    clusters_true: list[SurveyCluster]
    clusters_reported: list[SurveyCluster]
    embeddings: EmbeddingTable
    truth: list[TruthRow]


def _wealth_field(
    centers_lat: np.ndarray, centers_lon: np.ndarray, sigma_km: float
) -> "callable":
    """Closure computing the latent wealth at a point: a clipped sum of
    Gaussian bumps of scale `sigma_km` around the given centers."""

    centers = [GeoPoint(float(la), float(lo)) for la, lo in zip(centers_lat, centers_lon)]

    def wealth(p: GeoPoint) -> float:
        total = 0.0
        for c in centers:
            d = haversine_km(p, c)
            total += math.exp(-(d * d) / (2.0 * sigma_km * sigma_km))
        return min(100.0, max(0.0, 20.0 + 70.0 * total))

    return wealth


def generate_synthetic(
    config: SyntheticWorldConfig, model: DisplacementModel | None = None
) -> SyntheticWorld:
    """Generate a seeded synthetic world; a pure function of the config.

    With zero embedding and label noise the embedding of any location is an
    exact linear encoding of the wealth surface, so a least-squares probe
    recovers the labels almost perfectly; every model in the pipeline should
    approach that ceiling.
    """
    if model is None:
        model = DisplacementModel()
    if config.n_clusters > config.n_settlements:
        raise DatasetError(
            f"n_clusters ({config.n_clusters}) exceeds n_settlements ({config.n_settlements})"
        )
    lat_min, lat_max, lon_min, lon_max = config.bbox
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))

    # Fixed draw order below; do not reorder without bumping the format.
    direction = rng.normal(size=EMBEDDING_DIM)
    direction /= np.linalg.norm(direction)

    centers_lat = rng.uniform(lat_min, lat_max, size=config.n_centers)
    centers_lon = rng.uniform(lon_min, lon_max, size=config.n_centers)
    wealth = _wealth_field(centers_lat, centers_lon, config.center_sigma_km)

    # Settlements: 70% clustered around wealth centers, 30% uniform.
    settlements: list[Settlement] = []
    for i in range(config.n_settlements):
        if rng.random() < 0.7:
            c_idx = int(rng.integers(config.n_centers))
            dx, dy = rng.normal(0.0, config.center_sigma_km, size=2)
            origin = GeoPoint(float(centers_lat[c_idx]), float(centers_lon[c_idx]))
            loc = destination(origin, math.atan2(dx, dy), math.hypot(dx, dy))
        else:
            loc = GeoPoint(float(rng.uniform(lat_min, lat_max)), float(rng.uniform(lon_min, lon_max)))
        settlements.append(Settlement(settlement_id=f"S{i:06d}", location=loc))

    # Clusters: settlements sampled without replacement as true locations.
    true_idx = rng.choice(config.n_settlements, size=config.n_clusters, replace=False)
    kinds = [
        ClusterType.URBAN if rng.random() < config.urban_fraction else ClusterType.RURAL
        for _ in range(config.n_clusters)
    ]
    labels = []
    for i in range(config.n_clusters):
        y = wealth(settlements[true_idx[i]].location) + rng.normal(0.0, config.label_noise_sigma)
        labels.append(min(100.0, max(0.0, y)))

    # Survey assignment: longitude bands over the true locations, so surveys
    # are spatially coherent the way national surveys are.
    lons = np.array([settlements[true_idx[i]].location.lon for i in range(config.n_clusters)])
    band = np.empty(config.n_clusters, dtype=np.int64)
    band[np.argsort(lons, kind="stable")] = (
        np.arange(config.n_clusters) * config.n_surveys // config.n_clusters
    )

    clusters_true: list[SurveyCluster] = []
    clusters_reported: list[SurveyCluster] = []
    for i in range(config.n_clusters):
        true_loc = settlements[true_idx[i]].location
        reported = displace(true_loc, kinds[i], model, rng)
        common = dict(
            survey_id=f"SV{band[i]:02d}",
            cluster_id=f"C{i:04d}",
            kind=kinds[i],
            iwi=labels[i],
        )
        clusters_true.append(SurveyCluster(reported=true_loc, **common))
        clusters_reported.append(SurveyCluster(reported=reported, **common))

    # Dropout happens after cluster placement: a dropped settlement that was
    # some cluster's true location reproduces candidate-set incompleteness.
    if config.settlement_dropout > 0.0:
        keep = rng.random(config.n_settlements) >= config.settlement_dropout
        settlements = [s for i, s in enumerate(settlements) if keep[i]]

    embeddings = EmbeddingTable(dim=EMBEDDING_DIM)

    def embed(p: GeoPoint) -> np.ndarray:
        x = direction * (wealth(p) / 100.0)
        if config.embed_noise_sigma > 0.0:
            x = x + rng.normal(0.0, config.embed_noise_sigma, size=EMBEDDING_DIM)
        return x

    truth: list[TruthRow] = []
    for s in settlements:
        embeddings.add(s.settlement_id, embed(s.location))
        truth.append(TruthRow(key=s.settlement_id, location=s.location, true_wealth=wealth(s.location)))
    for c_true, c_rep in zip(clusters_true, clusters_reported):
        embeddings.add(c_rep.key, embed(c_rep.reported))
        truth.append(
            TruthRow(key=c_true.key, location=c_true.reported, true_wealth=wealth(c_true.reported))
        )

    return SyntheticWorld(
        settlements=settlements,
        clusters_true=clusters_true,
        clusters_reported=clusters_reported,
        embeddings=embeddings,
        truth=truth,
    )
