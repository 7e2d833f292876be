"""
训练服务

- 光度增强（只改颜色，不做几何变换）
- 数据线程通过有界队列向优化线程输送批次
- AdamW + 线性预热 + 余弦衰减，梯度裁剪，τ 截断
- 周期性检查点与断点续训（续训轨迹与不中断时逐位一致）
- 有限差分梯度检查
"""
import copy
import hashlib
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, replace, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config import Config, ModelConfig, TrainConfig
from models.ego2map import Ego2MapModel
from models.objectives import BatchLosses, NonFiniteLossError, total_loss
from schemas.manifest_schema import ShardManifest, Split
from services.dataset import IndexEntry, TrainingRecord, select_records, stack_records, stream_records
from sim.mapper import MapAblation, ablate_rgb

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
METRIC_COLUMNS = ("step", "l_c", "l_theta", "l_d", "l_total", "tau")
LATEST_CHECKPOINT = "checkpoint_latest.pt"
FINAL_CHECKPOINT = "checkpoint_final.pt"
METRICS_FILE = "metrics.tsv"
_QUEUE_POLL_SECONDS = 0.1


class CheckpointError(ValueError):
    """检查点版本或配置与当前运行不符"""
    pass


@dataclass
class TrainResult:
    """一次 fit 的产出"""
    checkpoint_path: str
    metrics_path: str
    global_step: int
    steps_per_epoch: int
    records: int
    last_losses: Dict[str, float] = field(default_factory=dict)
    interrupted: bool = False


def set_determinism(seed: int, threads: int = 1):
    """固定随机种子与线程数；同一线程配置下的两次运行结果逐位一致"""
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


def _record_seed(record_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(record_id.encode("utf-8"), digest_size=8).digest(), "little")


def augment(record: TrainingRecord, seed: int, epoch: int, cfg: TrainConfig) -> TrainingRecord:
    """
    光度增强，由 (seed, record_id, epoch) 唯一确定

    视图：逐通道亮度与对比度抖动 ±view_jitter；地图：亮度抖动 ±map_jitter。
    深度不变，结果截断到 [0, 1]。地图须已转换为 [0,1] 浮点。
    """
    if not cfg.augment:
        return record
    rng = np.random.default_rng([seed, _record_seed(record.record_id), epoch])

    def jitter_views(rgb: np.ndarray) -> np.ndarray:
        j = cfg.view_jitter
        if j == 0:
            return rgb
        n = rgb.shape[0]
        brightness = rng.uniform(1 - j, 1 + j, size=(n, 1, 1, 3)).astype(np.float32)
        contrast = rng.uniform(1 - j, 1 + j, size=(n, 1, 1, 3)).astype(np.float32)
        mean = rgb.mean(axis=(1, 2), keepdims=True)
        return np.clip(((rgb - mean) * contrast + mean) * brightness, 0.0, 1.0).astype(np.float32)

    pair_rgb = jitter_views(record.pair_rgb)
    triplet_rgb = jitter_views(record.triplet_rgb)
    map_rgb = record.map_rgb
    if cfg.map_jitter != 0:
        gain = np.float32(rng.uniform(1 - cfg.map_jitter, 1 + cfg.map_jitter))
        map_rgb = np.clip(map_rgb * gain, 0.0, 1.0).astype(np.float32)
    return replace(record, pair_rgb=pair_rgb, triplet_rgb=triplet_rgb, map_rgb=map_rgb)


def prepare_record(
    record: TrainingRecord, cfg: TrainConfig, seed: int, epoch: int, train: bool = True
) -> Tuple[TrainingRecord, bool]:
    """地图消融 → 转为 [0,1] 浮点 → （训练时）增强；返回 (记录, no_target)"""
    mode = MapAblation.parse(cfg.map_ablation)
    map_rgb = ablate_rgb(record.map_rgb, record.map_labels, mode).astype(np.float32) / np.float32(255.0)
    prepared = replace(record, map_rgb=map_rgb)
    if train:
        prepared = augment(prepared, seed, epoch, cfg)
    return prepared, mode == MapAblation.NO_TARGET


def collate(records: Sequence[TrainingRecord], no_target: Sequence[bool]) -> Dict[str, torch.Tensor]:
    arrays = stack_records(records)
    batch = {
        name: torch.from_numpy(np.ascontiguousarray(arrays[name]))
        for name in ("pair_rgb", "pair_depth", "triplet_rgb", "triplet_depth", "d_stars")
    }
    batch["theta_star"] = torch.from_numpy(arrays["theta_star"])
    batch["map_rgb"] = torch.from_numpy(np.ascontiguousarray(arrays["map_rgb"], dtype=np.float32))
    batch["no_target"] = torch.tensor(list(no_target), dtype=torch.bool)
    return batch


def iter_batches(
    manifest: ShardManifest,
    entries: List[IndexEntry],
    cfg: TrainConfig,
    epoch: int,
    skip_batches: int = 0,
    train: bool = True,
) -> Iterator[Dict[str, torch.Tensor]]:
    """
    后台线程读取、增强并组批，经有界队列交给调用方

    最后一个不满的批次保留；跳过的批次不做增强。
    """
    n = cfg.batch_size
    q: "queue.Queue" = queue.Queue(maxsize=max(1, cfg.loader_queue))
    stop = threading.Event()
    done = object()

    def put(item) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=_QUEUE_POLL_SECONDS)
                return True
            except queue.Full:
                continue
        return False

    def produce():
        try:
            records, flags = [], []
            stream = stream_records(
                manifest, Split.TRAIN, shuffle_seed=cfg.seed, epoch=epoch, shuffle=train, entries=entries
            )
            for i, record in enumerate(stream):
                if i // n < skip_batches:
                    continue
                prepared, no_target = prepare_record(record, cfg, cfg.seed, epoch, train)
                records.append(prepared)
                flags.append(no_target)
                if len(records) == n:
                    if not put(collate(records, flags)):
                        return
                    records, flags = [], []
            if records and not put(collate(records, flags)):
                return
            put(done)
        except Exception as e:
            put(e)

    worker = threading.Thread(target=produce, name=f"loader-epoch{epoch}", daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while not q.empty():
            q.get_nowait()
        worker.join()


def lr_schedule(total_steps: int, warmup_frac: float):
    """线性预热后余弦衰减到 0 的学习率倍率"""
    warmup = max(1, int(round(warmup_frac * total_steps)))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return factor


def build_optimizer(model: Ego2MapModel, cfg: TrainConfig, total_steps: int):
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_schedule(total_steps, cfg.warmup_frac))
    return optimizer, scheduler


def train_step(
    model: Ego2MapModel,
    optimizer: torch.optim.Optimizer,
    batch: Dict[str, torch.Tensor],
    cfg: TrainConfig,
    step: int = 0,
    scheduler=None,
) -> BatchLosses:
    """一次前向 + 反向 + 优化器更新；损失非有限时带步号中止"""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    try:
        losses = total_loss(model, batch, cfg.enabled_losses, cfg.circular_angle)
    except NonFiniteLossError as e:
        raise NonFiniteLossError(f"第 {step} 步损失非有限，训练中止: {e}") from e
    losses.l_total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    model.clamp_tau()
    return losses


def save_checkpoint(
    path: str,
    model: Ego2MapModel,
    optimizer,
    scheduler,
    epoch: int,
    step_in_epoch: int,
    global_step: int,
    config_hash: str,
):
    """先写临时文件再原子替换"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": vars(model.cfg).copy(),
        "tau_min": model.tau_min,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "epoch": epoch,
        "step_in_epoch": step_in_epoch,
        "global_step": global_step,
        "config_hash": config_hash,
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.debug(f"检查点已保存: {path} (step={global_step})")


def load_checkpoint(path: str) -> Dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"检查点不存在: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"不支持的检查点版本: {payload.get('format_version')}")
    return payload


def model_from_checkpoint(path: str) -> Tuple[Ego2MapModel, Dict]:
    payload = load_checkpoint(path)
    model = Ego2MapModel(ModelConfig(**payload["model_config"]), tau_min=payload["tau_min"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


def _metrics_header(cfg: Config) -> List[str]:
    tc = cfg.train
    enabled = ",".join(name for name, on in tc.enabled_losses.items() if on)
    return [
        f"# config_hash = {cfg.config_hash}",
        f"# losses = {enabled}",
        f"# map_ablation = {tc.map_ablation}",
        f"# preset = {tc.preset or 'custom'}",
        f"# world_fraction = {tc.world_fraction}",
        f"# sample_fraction = {tc.sample_fraction}",
        "\t".join(METRIC_COLUMNS),
    ]


def _metric_row(step: int, values: Dict[str, float], tau: float) -> str:
    cells = [str(step)] + [f"{values[name]:.9e}" for name in METRIC_COLUMNS[1:-1]] + [f"{tau:.9e}"]
    return "\t".join(cells)


def _truncate_metrics(path: str, global_step: int):
    """续训时丢弃检查点之后写入的行"""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    kept = []
    for line in lines:
        head = line.split("\t", 1)[0]
        if line.startswith("#") or head == METRIC_COLUMNS[0] or int(head) <= global_step:
            kept.append(line)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(kept) + "\n")


def fit(
    cfg: Config,
    manifest: ShardManifest,
    out_dir: str,
    resume: Optional[str] = None,
    stop_after_steps: Optional[int] = None,
) -> TrainResult:
    """
    训练主循环

    每个 epoch 按 (seed, epoch) 确定的顺序流式读取选中的训练记录，共 ⌈n/N⌉ 步。
    每 checkpoint_every 个 epoch 覆盖 checkpoint_latest.pt，结束时写 checkpoint_final.pt。
    stop_after_steps 用于模拟中断：到达步数后保存最新检查点并返回。
    """
    tc = cfg.train
    os.makedirs(out_dir, exist_ok=True)
    set_determinism(tc.seed, cfg.runtime.threads)

    entries = select_records(manifest, Split.TRAIN, tc.sample_fraction, tc.world_fraction, tc.seed)
    steps_per_epoch = math.ceil(len(entries) / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    model = Ego2MapModel(cfg.model, tau_init=tc.tau_init, tau_min=tc.tau_min)
    optimizer, scheduler = build_optimizer(model, tc, total_steps)
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    latest_path = os.path.join(out_dir, LATEST_CHECKPOINT)
    enabled = [name for name, on in tc.enabled_losses.items() if on]
    logger.info(
        f"开始训练: {len(entries)} 条记录, N={tc.batch_size}, {tc.epochs} 个epoch, "
        f"每epoch {steps_per_epoch} 步, 损失={enabled}, 地图消融={tc.map_ablation}"
    )

    start_epoch, skip, global_step = 0, 0, 0
    if resume:
        state = load_checkpoint(resume)
        if state["config_hash"] != cfg.config_hash:
            raise CheckpointError(
                f"检查点配置哈希 {state['config_hash']} 与当前配置 {cfg.config_hash} 不符"
            )
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        start_epoch, skip, global_step = state["epoch"], state["step_in_epoch"], state["global_step"]
        _truncate_metrics(metrics_path, global_step)
        logger.info(f"从检查点续训: {resume} (epoch={start_epoch}, step={global_step})")
    else:
        with open(metrics_path, "w", encoding="utf-8") as f:
            f.write("\n".join(_metrics_header(cfg)) + "\n")

    last: Dict[str, float] = {}
    with open(metrics_path, "a", encoding="utf-8") as metrics:
        for epoch in range(start_epoch, tc.epochs):
            step_in_epoch = skip if epoch == start_epoch else 0
            for batch in iter_batches(manifest, entries, tc, epoch, skip_batches=step_in_epoch):
                losses = train_step(model, optimizer, batch, tc, step=global_step, scheduler=scheduler)
                global_step += 1
                step_in_epoch += 1
                last = losses.as_floats()
                metrics.write(_metric_row(global_step, last, float(model.tau.detach())) + "\n")
                if stop_after_steps is not None and global_step >= stop_after_steps:
                    metrics.flush()
                    e, s = (epoch + 1, 0) if step_in_epoch >= steps_per_epoch else (epoch, step_in_epoch)
                    save_checkpoint(latest_path, model, optimizer, scheduler, e, s, global_step, cfg.config_hash)
                    logger.info(f"在第 {global_step} 步中断，检查点: {latest_path}")
                    return TrainResult(
                        latest_path, metrics_path, global_step, steps_per_epoch, len(entries), last, True
                    )
            metrics.flush()
            logger.info(
                f"epoch {epoch + 1}/{tc.epochs} 完成: "
                + ", ".join(f"{k}={v:.4f}" for k, v in last.items())
                + f", tau={float(model.tau.detach()):.4f}"
            )
            if (epoch + 1) % tc.checkpoint_every == 0:
                save_checkpoint(latest_path, model, optimizer, scheduler, epoch + 1, 0, global_step, cfg.config_hash)

    final_path = os.path.join(out_dir, FINAL_CHECKPOINT)
    save_checkpoint(final_path, model, optimizer, scheduler, tc.epochs, 0, global_step, cfg.config_hash)
    logger.info(f"✅ 训练完成: {global_step} 步，最终检查点 {final_path}")
    return TrainResult(final_path, metrics_path, global_step, steps_per_epoch, len(entries), last)


@dataclass
class GradCheckResult:
    max_rel_error: float
    coords: int
    groups: List[str]
    max_abs_grad: float


def zero_loss_batch(model: Ego2MapModel, batch: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """取批次首个样本，并把 θ*、d* 换成模型当前预测（N=1 时 InfoNCE 恒为 0）"""
    one = {k: v[:1].clone() for k, v in batch.items()}
    with torch.no_grad():
        f_pair = model.encode_rgbd(one["pair_rgb"][:, 0], one["pair_depth"][:, 0]), model.encode_rgbd(
            one["pair_rgb"][:, 1], one["pair_depth"][:, 1]
        )
        one["theta_star"] = model.predict_angle(*f_pair).to(one["theta_star"].dtype)
        views_rgb = torch.cat([one["pair_rgb"], one["triplet_rgb"]], dim=1)[0]
        views_depth = torch.cat([one["pair_depth"], one["triplet_depth"]], dim=1)[0]
        d = model.predict_distance(model.encode_rgbd(views_rgb, views_depth))
        one["d_stars"] = d.reshape(1, -1).to(one["d_stars"].dtype)
    return one


def _cast_batch(batch: Dict[str, torch.Tensor], dtype: torch.dtype) -> Dict[str, torch.Tensor]:
    return {k: v.to(dtype) if v.is_floating_point() else v for k, v in batch.items()}


def grad_check(
    model_cfg: ModelConfig,
    batch: Dict[str, torch.Tensor],
    dtype: torch.dtype = torch.float64,
    n_coords: int = 256,
    h: float = 1e-5,
    seed: int = 0,
    enabled: Optional[Dict[str, bool]] = None,
    zero_loss: bool = False,
) -> GradCheckResult:
    """
    解析梯度与中心差分比较

    解析梯度在 dtype 下计算；差分始终在 float64 副本上计算。每个参数张量至少抽一个坐标，
    其余坐标在全部参数上均匀抽取。相对误差 |a−n| / max(|a|, |n|, 1e-3·max|n|, tiny)。
    """
    enabled = enabled or {"c": True, "theta": True, "d": True}
    torch.manual_seed(seed)
    model = Ego2MapModel(model_cfg).to(dtype)
    if zero_loss:
        batch = zero_loss_batch(model, _cast_batch(batch, dtype))
    model.zero_grad(set_to_none=True)
    total_loss(model, _cast_batch(batch, dtype), enabled).l_total.backward()

    reference = copy.deepcopy(model).double()
    batch64 = _cast_batch(batch, torch.float64)
    named = [(name, p) for name, p in model.named_parameters()]
    params64 = dict(reference.named_parameters())

    rng = np.random.default_rng(seed)
    picks: List[Tuple[str, int]] = [(name, int(rng.integers(p.numel()))) for name, p in named]
    sizes = np.array([p.numel() for _, p in named], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in rng.choice(int(offsets[-1]), size=max(0, n_coords - len(picks)), replace=True):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        picks.append((named[k][0], int(flat - offsets[k])))

    grads = {name: (p.grad if p.grad is not None else torch.zeros_like(p)) for name, p in named}
    analytic, numeric = [], []
    with torch.no_grad():
        for name, i in picks:
            target = params64[name].view(-1)
            original = target[i].item()
            target[i] = original + h
            plus = total_loss(reference, batch64, enabled).l_total.item()
            target[i] = original - h
            minus = total_loss(reference, batch64, enabled).l_total.item()
            target[i] = original
            numeric.append((plus - minus) / (2 * h))
            analytic.append(grads[name].reshape(-1)[i].item())

    a, n = np.asarray(analytic), np.asarray(numeric)
    floor = max(1e-3 * float(np.max(np.abs(n))), np.finfo(np.float64).tiny)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    result = GradCheckResult(
        max_rel_error=float(rel.max()),
        coords=len(picks),
        groups=[name for name, _ in named],
        max_abs_grad=float(max(np.max(np.abs(a)), np.max(np.abs(n)))),
    )
    logger.info(
        f"梯度检查 ({dtype}): {result.coords} 个坐标, {len(result.groups)} 个参数组, "
        f"最大相对误差 {result.max_rel_error:.3e}"
    )
    return result
