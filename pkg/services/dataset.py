"""
分片数据集
训练记录的位级精确二进制分片存储、清单、按世界划分，以及按比例取子集的确定性流式读取

分片格式（小端）：
    magic "E2MS" | u16 版本 | u32 记录数 | 记录...
    记录：u32 键长 | 键（UTF-8，即 record_id） | u64 负载长 | 负载
    负载：u16 字段数 | 字段...
    字段：u16 名称长 | 名称 | u8 类型码 | u8 维数 | 维数×u32 形状 | 原始字节
"""
import os
import io
import struct
import hashlib
import logging
from dataclasses import dataclass, fields as dataclass_fields
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from config import CameraConfig, MapConfig
from schemas.manifest_schema import SHARD_FORMAT_VERSION, ShardEntry, ShardManifest, Split
from sim.mapper import build_semantic_map
from sim.sampler import WorldSamples, make_view_pairs, VIEWS_PER_VIEWPOINT
from sim.world import World

logger = logging.getLogger(__name__)

SHARD_MAGIC = b"E2MS"
SHARD_SUFFIX = ".e2ms"
_SHARD_HEADER = struct.Struct("<4sHI")
_KEY_LEN = struct.Struct("<I")
_PAYLOAD_LEN = struct.Struct("<Q")
_FIELD_COUNT = struct.Struct("<H")
_NAME_LEN = struct.Struct("<H")
_FIELD_HEAD = struct.Struct("<BB")
_DIM = struct.Struct("<I")

# 类型码 → numpy 小端类型
DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("|u1"),
    3: np.dtype("<i8"),
}
STR_CODE = 4
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


class ShardFormatError(ValueError):
    """分片内容与格式不符（魔数、版本、截断、字段）"""
    pass


class ShardIOError(IOError):
    """分片读写失败（附带分片路径）"""
    pass


class EmptySelectionError(ValueError):
    """按比例筛选后没有任何记录"""
    pass


@dataclass
class TrainingRecord:
    """
    一条训练数据：一个视图对 (I_θ0, I_θ1, θ*) 加一个三元组 (I_s, I_t, M)

    四张图像的顺序固定为 [I_θ0, I_θ1, I_s, I_t]，d_stars / classes 与之对齐。
    """
    record_id: str
    world_id: int
    pair_rgb: np.ndarray        # (2, H, W, 3) f32
    pair_depth: np.ndarray      # (2, H, W) f32
    theta_star: float
    triplet_rgb: np.ndarray     # (2, H, W, 3) f32
    triplet_depth: np.ndarray   # (2, H, W) f32
    map_rgb: np.ndarray         # (G, G, 3) u8
    map_labels: np.ndarray      # (G, G) u8
    d_stars: np.ndarray         # (4,) f32
    classes: np.ndarray         # (4, 12) u8
    path_length: float = 0.0
    path_actions: int = 0
    source_view_id: int = -1
    target_view_id: int = -1

    @property
    def views_rgb(self) -> np.ndarray:
        return np.concatenate([self.pair_rgb, self.triplet_rgb])

    @property
    def views_depth(self) -> np.ndarray:
        return np.concatenate([self.pair_depth, self.triplet_depth])


# 字段名 → 存储类型码（str 字段单独处理）
_RECORD_FIELDS: Dict[str, int] = {
    "record_id": STR_CODE,
    "world_id": 3,
    "pair_rgb": 0,
    "pair_depth": 0,
    "theta_star": 1,
    "triplet_rgb": 0,
    "triplet_depth": 0,
    "map_rgb": 2,
    "map_labels": 2,
    "d_stars": 0,
    "classes": 2,
    "path_length": 1,
    "path_actions": 3,
    "source_view_id": 3,
    "target_view_id": 3,
}
_SCALAR_FIELDS = {"world_id", "theta_star", "path_length", "path_actions", "source_view_id", "target_view_id"}


def record_key(world_id: int, index: int) -> str:
    return f"w{world_id:04d}-r{index:05d}"


def world_of_key(key: str) -> int:
    """从 record_id 读出世界编号（无需解码负载）"""
    try:
        return int(key.split("-", 1)[0][1:])
    except (ValueError, IndexError):
        raise ShardFormatError(f"无法从键解析世界编号: {key!r}")


def encode_record(record: TrainingRecord) -> bytes:
    buf = io.BytesIO()
    buf.write(_FIELD_COUNT.pack(len(_RECORD_FIELDS)))
    for name, code in _RECORD_FIELDS.items():
        value = getattr(record, name)
        encoded_name = name.encode("utf-8")
        buf.write(_NAME_LEN.pack(len(encoded_name)))
        buf.write(encoded_name)
        if code == STR_CODE:
            raw = value.encode("utf-8")
            buf.write(_FIELD_HEAD.pack(STR_CODE, 1))
            buf.write(_DIM.pack(len(raw)))
            buf.write(raw)
            continue
        array = np.ascontiguousarray(value, dtype=DTYPE_CODES[code])
        buf.write(_FIELD_HEAD.pack(code, array.ndim))
        for dim in array.shape:
            buf.write(_DIM.pack(dim))
        buf.write(array.tobytes(order="C"))
    return buf.getvalue()


def decode_record(payload: bytes, only: Optional[Set[str]] = None):
    """
    解码负载；only 给出时只返回这些字段组成的字典，否则返回 TrainingRecord
    """
    view = memoryview(payload)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ShardFormatError("记录负载被截断")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = _FIELD_COUNT.unpack(take(_FIELD_COUNT.size))
    values = {}
    for _ in range(count):
        (name_len,) = _NAME_LEN.unpack(take(_NAME_LEN.size))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = _FIELD_HEAD.unpack(take(_FIELD_HEAD.size))
        shape = tuple(_DIM.unpack(take(_DIM.size))[0] for _ in range(ndim))
        if code == STR_CODE:
            raw = bytes(take(shape[0]))
            if only is None or name in only:
                values[name] = raw.decode("utf-8")
            continue
        if code not in DTYPE_CODES:
            raise ShardFormatError(f"字段 {name} 的类型码未知: {code}")
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = take(nbytes)
        if only is not None and name not in only:
            continue
        array = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        values[name] = array.item() if name in _SCALAR_FIELDS else array

    if only is not None:
        return values
    expected = {f.name for f in dataclass_fields(TrainingRecord)}
    if set(values) != expected:
        raise ShardFormatError(f"记录字段不匹配: 缺少 {sorted(expected - set(values))}")
    return TrainingRecord(**values)


def build_records(
    world_id: int,
    w: World,
    samples: WorldSamples,
    cam: Optional[CameraConfig] = None,
    map_cfg: Optional[MapConfig] = None,
) -> Iterator[TrainingRecord]:
    """
    把一个世界的三元组组装成训练记录

    每个三元组配上其源视点中不包含 I_s 的那个视图对。
    """
    by_id = {vp.id: vp for vp in samples.viewpoints}
    for index, triplet in enumerate(samples.triplets):
        source_vp = by_id[triplet.source_viewpoint]
        source_slot = triplet.source.view_id % VIEWS_PER_VIEWPOINT
        pair = make_view_pairs(source_vp)[1 if source_slot < 2 else 0]
        m = build_semantic_map(w, triplet.path, cam, map_cfg)
        images = (pair.a, pair.b, triplet.source, triplet.target)
        yield TrainingRecord(
            record_id=record_key(world_id, index),
            world_id=world_id,
            pair_rgb=np.stack([pair.a.image.rgb, pair.b.image.rgb]),
            pair_depth=np.stack([pair.a.image.depth, pair.b.image.depth]),
            theta_star=float(pair.theta_star),
            triplet_rgb=np.stack([triplet.source.image.rgb, triplet.target.image.rgb]),
            triplet_depth=np.stack([triplet.source.image.depth, triplet.target.image.depth]),
            map_rgb=np.round(m.rgb * 255.0).astype(np.uint8),
            map_labels=m.labels,
            d_stars=np.array([v.d_star for v in images], dtype=np.float32),
            classes=np.stack([v.classes for v in images]).astype(np.uint8),
            path_length=triplet.path.length,
            path_actions=triplet.path.num_moves,
            source_view_id=triplet.source.view_id,
            target_view_id=triplet.target.view_id,
        )


def split_worlds(world_ids: Sequence[int], val_fraction: float, seed: int = 0) -> Tuple[List[int], List[int]]:
    """按世界划分训练/验证集，两者互不相交"""
    ids = sorted(set(int(i) for i in world_ids))
    if len(ids) < 2:
        raise ValueError("至少需要2个世界才能划分训练/验证集")
    n_val = min(len(ids) - 1, max(1, int(round(len(ids) * val_fraction))))
    order = np.random.default_rng([seed, len(ids)]).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    train = [i for i in ids if i not in set(val)]
    return train, val


class ShardWriter:
    """
    按固定大小滚动写分片；每个分片先写临时文件再原子改名

    写入失败时删除未完成的分片并抛出 ShardIOError。
    """

    def __init__(self, out_dir: str, split: Split = Split.TRAIN, shard_size: int = 500):
        if shard_size < 1:
            raise ValueError("shard_size 必须 >= 1")
        self.out_dir = out_dir
        self.split = Split(split)
        self.shard_size = shard_size
        self.entries: List[ShardEntry] = []
        self._pending: List[Tuple[str, bytes]] = []
        self._pending_worlds: Set[int] = set()
        os.makedirs(out_dir, exist_ok=True)

    def add(self, record: TrainingRecord):
        self._pending.append((record.record_id, encode_record(record)))
        self._pending_worlds.add(int(record.world_id))
        if len(self._pending) >= self.shard_size:
            self._flush()

    def _flush(self):
        if not self._pending:
            return
        name = f"{self.split.value}-{len(self.entries):05d}{SHARD_SUFFIX}"
        path = os.path.join(self.out_dir, name)
        tmp = path + ".tmp"
        try:
            with open(tmp, "wb") as f:
                f.write(_SHARD_HEADER.pack(SHARD_MAGIC, SHARD_FORMAT_VERSION, len(self._pending)))
                for key, payload in self._pending:
                    raw_key = key.encode("utf-8")
                    f.write(_KEY_LEN.pack(len(raw_key)))
                    f.write(raw_key)
                    f.write(_PAYLOAD_LEN.pack(len(payload)))
                    f.write(payload)
            os.replace(tmp, path)
        except OSError as e:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise ShardIOError(f"写分片失败 {path}: {e}")
        self.entries.append(ShardEntry(
            path=name, records=len(self._pending), split=self.split, worlds=sorted(self._pending_worlds)
        ))
        logger.debug(f"分片已写入: {path} ({len(self._pending)} 条)")
        self._pending, self._pending_worlds = [], set()

    def close(self) -> List[ShardEntry]:
        self._flush()
        return self.entries

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._pending = []
        return False


def write_shards(
    records: Iterable[TrainingRecord],
    out_dir: str,
    shard_size: int = 500,
    split: Split = Split.TRAIN,
    seed: int = 0,
) -> ShardManifest:
    """把记录流写成固定大小的分片（最后一个可以不满）"""
    with ShardWriter(out_dir, split, shard_size) as writer:
        for record in records:
            writer.add(record)
    if not writer.entries:
        raise EmptySelectionError("没有记录可写入分片")
    manifest = ShardManifest(seed=seed, shard_size=shard_size, shards=writer.entries).with_root(out_dir)
    logger.info(f"✅ {split} 分片写入完成: {len(writer.entries)} 个分片, {manifest.record_count()} 条记录")
    return manifest


def save_manifest(manifest: ShardManifest, path: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(manifest.to_text())


def load_manifest(path: str) -> ShardManifest:
    if not os.path.exists(path):
        raise ShardIOError(f"清单不存在: {path}")
    return ShardManifest.load(path)


@dataclass(frozen=True)
class IndexEntry:
    record_id: str
    world_id: int
    shard_path: str
    offset: int


def scan_shard(path: str) -> List[IndexEntry]:
    """只读键与长度重新扫描分片，返回每条记录的起始偏移"""
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as f:
            header = f.read(_SHARD_HEADER.size)
            if len(header) != _SHARD_HEADER.size:
                raise ShardFormatError(f"{path}: 文件头被截断")
            magic, version, count = _SHARD_HEADER.unpack(header)
            if magic != SHARD_MAGIC:
                raise ShardFormatError(f"{path}: 魔数错误 {magic!r}")
            if version != SHARD_FORMAT_VERSION:
                raise ShardFormatError(f"{path}: 不支持的版本 {version}")
            entries = []
            for _ in range(count):
                offset = f.tell()
                raw = f.read(_KEY_LEN.size)
                if len(raw) != _KEY_LEN.size:
                    raise ShardFormatError(f"{path}: 记录数与文件头不符")
                (key_len,) = _KEY_LEN.unpack(raw)
                key = f.read(key_len).decode("utf-8")
                (payload_len,) = _PAYLOAD_LEN.unpack(f.read(_PAYLOAD_LEN.size))
                if f.tell() + payload_len > size:
                    raise ShardFormatError(f"{path}: 记录 {key} 被截断")
                f.seek(payload_len, os.SEEK_CUR)
                entries.append(IndexEntry(key, world_of_key(key), path, offset))
            return entries
    except OSError as e:
        raise ShardIOError(f"读分片失败 {path}: {e}")


def _read_at(handle, offset: int) -> Tuple[str, bytes]:
    handle.seek(offset)
    (key_len,) = _KEY_LEN.unpack(handle.read(_KEY_LEN.size))
    key = handle.read(key_len).decode("utf-8")
    (payload_len,) = _PAYLOAD_LEN.unpack(handle.read(_PAYLOAD_LEN.size))
    payload = handle.read(payload_len)
    if len(payload) != payload_len:
        raise ShardFormatError(f"记录 {key} 被截断")
    return key, payload


def read_record(path: str, offset: int) -> TrainingRecord:
    try:
        with open(path, "rb") as f:
            _, payload = _read_at(f, offset)
    except OSError as e:
        raise ShardIOError(f"读分片失败 {path}: {e}")
    return decode_record(payload)


def build_index(manifest: ShardManifest, split: Split) -> List[IndexEntry]:
    """扫描某个划分的全部分片，并核对清单中的记录数"""
    index: List[IndexEntry] = []
    for entry in manifest.entries(split):
        scanned = scan_shard(manifest.shard_path(entry))
        if len(scanned) != entry.records:
            raise ShardFormatError(
                f"{entry.path}: 清单记录数 {entry.records} 与实际 {len(scanned)} 不符"
            )
        index.extend(scanned)
    return index


def hash_unit(seed: int, record_id: str) -> float:
    """(seed, record_id) → [0, 1) 的确定性均匀值"""
    digest = hashlib.blake2b(f"{seed}:{record_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") / float(1 << 64)


def select_records(
    manifest: ShardManifest,
    split: Split,
    sample_fraction: float = 1.0,
    world_fraction: float = 1.0,
    seed: int = 0,
) -> List[IndexEntry]:
    """
    按比例选取记录

    world_fraction 取排序后世界编号的前缀；sample_fraction 按 hash(seed, record_id) 阈值保留，
    因此同一种子下小比例子集总是大比例子集的子集。
    """
    if not (0 < sample_fraction <= 1 and 0 < world_fraction <= 1):
        raise ValueError("sample_fraction/world_fraction 必须在 (0, 1] 内")
    index = build_index(manifest, split)
    worlds = sorted({e.world_id for e in index})
    keep_worlds = set(worlds[:max(1, int(np.ceil(round(world_fraction * len(worlds), 9))))]) if worlds else set()
    selected = [
        e for e in index
        if e.world_id in keep_worlds and (sample_fraction >= 1.0 or hash_unit(seed, e.record_id) < sample_fraction)
    ]
    if not selected:
        raise EmptySelectionError(
            f"{split} 在 world_fraction={world_fraction}, sample_fraction={sample_fraction} 下没有记录"
        )
    return selected


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def stream_records(
    manifest: ShardManifest,
    split: Split = Split.TRAIN,
    sample_fraction: float = 1.0,
    world_fraction: float = 1.0,
    shuffle_seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    entries: Optional[List[IndexEntry]] = None,
) -> Iterator[TrainingRecord]:
    """
    按 (种子, epoch) 确定的顺序流式读取记录，每个 epoch 恰好读取每条选中记录一次

    迭代器不可在多线程间共享，但多个独立迭代器可以并存。
    """
    if entries is None:
        entries = select_records(manifest, split, sample_fraction, world_fraction, shuffle_seed)
    order = epoch_order(len(entries), shuffle_seed, epoch) if shuffle else np.arange(len(entries))
    handles = {}
    try:
        for i in order:
            entry = entries[int(i)]
            handle = handles.get(entry.shard_path)
            if handle is None:
                try:
                    handle = handles[entry.shard_path] = open(entry.shard_path, "rb")
                except OSError as e:
                    raise ShardIOError(f"读分片失败 {entry.shard_path}: {e}")
            _, payload = _read_at(handle, entry.offset)
            yield decode_record(payload)
    finally:
        for handle in handles.values():
            handle.close()


def record_scalars(manifest: ShardManifest, split: Split, names: Set[str]) -> Dict[str, np.ndarray]:
    """只解码指定的标量/小字段，用于统计图"""
    collected: Dict[str, list] = {name: [] for name in names}
    for entry in build_index(manifest, split):
        with open(entry.shard_path, "rb") as f:
            _, payload = _read_at(f, entry.offset)
        values = decode_record(payload, only=names)
        for name in names:
            collected[name].append(values[name])
    return {name: np.asarray(v) for name, v in collected.items()}


def stack_records(records: Sequence[TrainingRecord]) -> Dict[str, np.ndarray]:
    """把一批记录堆叠成批数组"""
    return {
        "pair_rgb": np.stack([r.pair_rgb for r in records]),
        "pair_depth": np.stack([r.pair_depth for r in records]),
        "theta_star": np.array([r.theta_star for r in records], dtype=np.float64),
        "triplet_rgb": np.stack([r.triplet_rgb for r in records]),
        "triplet_depth": np.stack([r.triplet_depth for r in records]),
        "map_rgb": np.stack([r.map_rgb for r in records]),
        "map_labels": np.stack([r.map_labels for r in records]),
        "d_stars": np.stack([r.d_stars for r in records]),
        "classes": np.stack([r.classes for r in records]),
    }
