"""
Ego²-Map 预训练流水线编排器
负责串联世界生成 → 采样建图 → 训练 → 评估/探针/绘图/验证
"""
import glob
import logging
import os
import time
from collections import deque
from concurrent.futures import Executor, ProcessPoolExecutor
from itertools import islice
from typing import Callable, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from config import Config
from models.ego2map import export_encoder
from schemas.manifest_schema import ShardManifest, Split, WorldManifestEntry
from schemas.report_schema import EvalReport, ProbeScores, VerifyReport
from schemas.run_schema import RunConfig
from services import dataset, evaluator, plotting, trainer, verify
from sim.sampler import SamplingError, manifest_entry, sample_world_dataset, write_sampler_manifest
from sim.world import World, generate_world, load_world, save_world

logger = logging.getLogger(__name__)

WORLD_PATTERN = "world_{:04d}.e2mw"
MONTAGE_RECORDS = 4


def world_seed(seed: int, world_id: int) -> int:
    """由全局种子与世界编号派生的 64 位世界种子"""
    lo, hi = np.random.SeedSequence([seed, world_id]).generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def _sample_world(args) -> Tuple[int, Optional[WorldManifestEntry], List[dataset.TrainingRecord]]:
    """单个世界的采样与建图（可在子进程中执行）"""
    world_id, path, cfg = args
    w = load_world(path)
    rng = np.random.default_rng([cfg.seed, world_id, 1])
    try:
        samples = sample_world_dataset(w, rng, cfg.sampler, cfg.camera)
    except SamplingError as e:
        logger.warning(f"世界 {world_id} 采样失败，跳过: {e}")
        return world_id, None, []
    records = list(dataset.build_records(world_id, w, samples, cfg.camera, cfg.map))
    return world_id, manifest_entry(world_id, w, samples), records


def bounded_ordered_map(pool: Executor, fn: Callable, jobs: Iterable, window: int) -> Iterator:
    """按提交顺序产出结果；已提交但尚未取走的任务不超过 window 个"""
    jobs = iter(jobs)
    pending = deque(pool.submit(fn, job) for job in islice(jobs, window))
    while pending:
        head = pending.popleft()
        for job in islice(jobs, 1):
            pending.append(pool.submit(fn, job))
        yield head.result()


class Ego2MapPipeline:
    """
    流水线编排器

    输出目录布局：
        worlds/            world_XXXX.e2mw
        data/              分片、manifest.txt、sampler_manifest.txt
        train/             metrics.tsv、检查点、rgbd_encoder.pt
        eval/              report.txt、probe.txt
        plots/             图像
        verify/            report.txt
    """

    def __init__(self, cfg: Config, out_dir: Optional[str] = None):
        self.cfg = cfg
        self.out_dir = out_dir or cfg.runtime.out_dir
        self.worlds_dir = os.path.join(self.out_dir, "worlds")
        self.data_dir = os.path.join(self.out_dir, "data")
        self.train_dir = os.path.join(self.out_dir, "train")
        self.eval_dir = os.path.join(self.out_dir, "eval")
        self.plots_dir = os.path.join(self.out_dir, "plots")
        self.verify_dir = os.path.join(self.out_dir, "verify")
        os.makedirs(self.out_dir, exist_ok=True)

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.data_dir, "manifest.txt")

    @property
    def final_checkpoint(self) -> str:
        return os.path.join(self.train_dir, trainer.FINAL_CHECKPOINT)

    def echo_config(self, run: RunConfig):
        """把生效配置与命令行参数写入输出目录"""
        with open(os.path.join(self.out_dir, "effective_config.txt"), "w", encoding="utf-8") as f:
            f.write(self.cfg.to_text())
        run.config_hash = self.cfg.config_hash
        run.save(os.path.join(self.out_dir, "run_config.txt"))

    def run(self, stage: str, **kwargs):
        """执行一个阶段；失败时带上下文记录日志后重新抛出"""
        start = time.perf_counter()
        try:
            result = getattr(self, stage)(**kwargs)
        except Exception as e:
            logger.error(f"阶段 {stage} 失败 (out={self.out_dir}, seed={self.cfg.seed}): {type(e).__name__}: {e}")
            raise
        logger.info(f"阶段 {stage} 完成，用时 {time.perf_counter() - start:.1f}s")
        return result

    # ---- 世界 ----

    def worldgen(self, num_worlds: Optional[int] = None) -> List[str]:
        n = num_worlds or self.cfg.data.num_worlds
        os.makedirs(self.worlds_dir, exist_ok=True)
        paths = []
        for world_id in range(n):
            w = generate_world(world_seed(self.cfg.seed, world_id), self.cfg.world)
            path = os.path.join(self.worlds_dir, WORLD_PATTERN.format(world_id))
            save_world(w, path)
            paths.append(path)
        logger.info(f"✅ 已生成 {n} 个世界: {self.worlds_dir}")
        return paths

    def world_paths(self, num_worlds: Optional[int] = None) -> List[Tuple[int, str]]:
        """已有的世界文件；不足时先生成"""
        n = num_worlds or self.cfg.data.num_worlds
        wanted = [(i, os.path.join(self.worlds_dir, WORLD_PATTERN.format(i))) for i in range(n)]
        if not all(os.path.exists(p) for _, p in wanted):
            logger.info(f"世界文件不完整，重新生成 {n} 个世界")
            self.worldgen(n)
        return wanted

    def load_world(self, world_id: int) -> World:
        return load_world(os.path.join(self.worlds_dir, WORLD_PATTERN.format(world_id)))

    # ---- 采样 ----

    def _sampled_worlds(self, jobs) -> Iterator[Tuple[int, Optional[WorldManifestEntry], list]]:
        threads = self.cfg.runtime.threads
        if threads > 1 and len(jobs) > 1:
            workers = min(threads, len(jobs))
            with ProcessPoolExecutor(max_workers=workers) as pool:
                yield from bounded_ordered_map(pool, _sample_world, jobs, window=2 * workers)
        else:
            yield from map(_sample_world, jobs)

    def sample(self, num_worlds: Optional[int] = None) -> ShardManifest:
        """
        对每个世界采样视点、视图对与三元组，建图并写入分片

        训练/验证按世界划分；结果按世界编号顺序写出，与并行度无关。
        """
        worlds = self.world_paths(num_worlds)
        ids = [i for i, _ in worlds]
        train_ids, val_ids = dataset.split_worlds(ids, self.cfg.data.val_fraction, self.cfg.seed)
        logger.info(f"训练世界 {train_ids}，验证世界 {val_ids}")
        os.makedirs(self.data_dir, exist_ok=True)
        for stale in glob.glob(os.path.join(self.data_dir, f"*{dataset.SHARD_SUFFIX}")):
            os.remove(stale)

        jobs = [(i, path, self.cfg) for i, path in worlds]
        entries: List[WorldManifestEntry] = []
        size = self.cfg.data.shard_size
        with dataset.ShardWriter(self.data_dir, Split.TRAIN, size) as train_writer, \
                dataset.ShardWriter(self.data_dir, Split.VAL, size) as val_writer:
            for world_id, entry, records in self._sampled_worlds(jobs):
                if entry is None:
                    continue
                entries.append(entry)
                writer = val_writer if world_id in val_ids else train_writer
                for record in records:
                    writer.add(record)
                logger.info(f"世界 {world_id}: {len(records)} 条记录")
        for split, writer in ((Split.TRAIN, train_writer), (Split.VAL, val_writer)):
            if not writer.entries:
                raise dataset.EmptySelectionError(f"{split} 划分没有任何记录")

        manifest = ShardManifest(
            seed=self.cfg.seed, shard_size=size, shards=train_writer.entries + val_writer.entries
        ).with_root(self.data_dir)
        dataset.save_manifest(manifest, self.manifest_path)
        write_sampler_manifest(entries, os.path.join(self.data_dir, "sampler_manifest.txt"))
        logger.info(
            f"✅ 采样完成: 训练 {manifest.record_count(Split.TRAIN)} 条, 验证 {manifest.record_count(Split.VAL)} 条"
        )
        return manifest

    def manifest(self) -> ShardManifest:
        return dataset.load_manifest(self.manifest_path)

    # ---- 训练与评估 ----

    def train(self, resume: Optional[str] = None, stop_after_steps: Optional[int] = None) -> trainer.TrainResult:
        result = trainer.fit(self.cfg, self.manifest(), self.train_dir, resume, stop_after_steps)
        if not result.interrupted:
            model, _ = trainer.model_from_checkpoint(result.checkpoint_path)
            export_encoder(model, os.path.join(self.train_dir, "rgbd_encoder.pt"))
        return result

    def _model(self, checkpoint: Optional[str]):
        path = checkpoint or self.final_checkpoint
        model, payload = trainer.model_from_checkpoint(path)
        return model, payload, path

    def probe(self, checkpoint: Optional[str] = None) -> ProbeScores:
        model, _, _ = self._model(checkpoint)
        scores = evaluator.probe(model, self.manifest(), self.cfg)
        scores.save(os.path.join(self.eval_dir, "probe.txt"))
        return scores

    def evaluate(self, checkpoint: Optional[str] = None, with_probe: bool = True) -> EvalReport:
        model, payload, path = self._model(checkpoint)
        manifest = self.manifest()
        scores = evaluator.probe(model, manifest, self.cfg) if with_probe else None
        report = evaluator.evaluate(model, manifest, self.cfg, path, payload.get("config_hash", ""), scores)
        report.save(os.path.join(self.eval_dir, "report.txt"))
        if scores is not None:
            scores.save(os.path.join(self.eval_dir, "probe.txt"))
        return report

    def plot(self) -> List[str]:
        metrics = os.path.join(self.train_dir, trainer.METRICS_FILE)
        report_path = os.path.join(self.eval_dir, "report.txt")
        report = EvalReport.load(report_path) if os.path.exists(report_path) else None
        manifest = self.manifest()
        records = []
        for record in dataset.stream_records(manifest, Split.VAL, shuffle=False, entries=dataset.build_index(manifest, Split.VAL)):
            records.append(record)
            if len(records) >= MONTAGE_RECORDS:
                break
        paths = plotting.plot_metrics(metrics, self.plots_dir, report, records)
        scalars = [dataset.record_scalars(manifest, split, {"theta_star", "path_length"}) for split in Split]
        paths.append(plotting.plot_dataset_statistics(
            np.concatenate([s["theta_star"] for s in scalars]),
            np.concatenate([s["path_length"] for s in scalars]),
            self.plots_dir,
        ))
        return paths

    def verify(self, only: Optional[List[str]] = None) -> VerifyReport:
        report = verify.run_all(self.cfg.seed, only)
        os.makedirs(self.verify_dir, exist_ok=True)
        with open(os.path.join(self.verify_dir, "report.txt"), "w", encoding="utf-8") as f:
            f.write(report.to_text())
        return report
