"""
Ego²-Map 预训练流水线主程序
单一入口，子命令：worldgen / sample / train / eval / probe / plot / verify
"""
import argparse
import logging
import sys
from typing import Dict, List, Optional

from config import ConfigError, build_config
from orchestrator import Ego2MapPipeline
from schemas.run_schema import SUBCOMMANDS, RunConfig

# 配置日志
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _parse_overrides(items: List[str]) -> Dict[str, str]:
    overrides = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set 需要 key=value 形式，得到 {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed 必须是 64 位无符号整数")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Ego²-Map 预训练流水线 - 合成世界 → RGBD 视图/路径/地图 → 对比预训练 → 评估",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例：
  # 生成世界并采样
  python main.py sample --worlds 2 --seed 1 --out runs/demo

  # 训练（消融：只用角度损失）
  python main.py train --out runs/demo --set train.preset=model1

  # 评估（阈值未通过时退出码非0）
  python main.py eval --out runs/demo --set eval.min_acc_i2m=60

  # 运行全部 oracle 套件
  python main.py verify
        """
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='纯文本配置文件（section.key = value）')
    common.add_argument('--seed', type=_u64, help='全局种子（u64）')
    common.add_argument('--out', help='输出目录（默认 E2M_OUT 或 ./runs/default）')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='覆盖配置项，可重复')
    common.add_argument('--verbose', '-v', action='store_true', help='详细输出')

    sub = parser.add_subparsers(dest='command', required=True, metavar='{' + ",".join(SUBCOMMANDS) + '}')
    for name in ('worldgen', 'sample'):
        p = sub.add_parser(name, parents=[common], help=f'{name}')
        p.add_argument('--worlds', type=int, help='世界数量（默认 data.num_worlds）')
    p = sub.add_parser('train', parents=[common], help='训练')
    p.add_argument('--resume', help='从检查点续训')
    p.add_argument('--stop-after', type=int, help='训练到指定步数后保存检查点并退出')
    for name in ('eval', 'probe'):
        p = sub.add_parser(name, parents=[common], help=f'{name}')
        p.add_argument('--checkpoint', help='检查点路径（默认 train/checkpoint_final.pt）')
    sub.add_parser('plot', parents=[common], help='绘图')
    p = sub.add_parser('verify', parents=[common], help='运行 oracle 验证套件')
    p.add_argument('--suite', action='append', help='只运行指定套件，可重复')
    return parser


def run(args: argparse.Namespace) -> int:
    """执行子命令，返回退出码"""
    cfg = build_config(args.config, _parse_overrides(args.overrides), args.seed, args.out)
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else cfg.runtime.log_level.upper())
    pipeline = Ego2MapPipeline(cfg)
    pipeline.echo_config(RunConfig(
        subcommand=args.command,
        config_path=args.config,
        seed=cfg.seed,
        out_dir=pipeline.out_dir,
        overrides=args.overrides,
    ))

    if args.command == 'worldgen':
        pipeline.run("worldgen", num_worlds=args.worlds)
    elif args.command == 'sample':
        pipeline.run("sample", num_worlds=args.worlds)
    elif args.command == 'train':
        result = pipeline.run("train", resume=args.resume, stop_after_steps=args.stop_after)
        print(f"✅ 训练 {result.global_step} 步，检查点: {result.checkpoint_path}")
    elif args.command == 'probe':
        scores = pipeline.run("probe", checkpoint=args.checkpoint)
        print(scores.to_text(), end="")
    elif args.command == 'eval':
        report = pipeline.run("evaluate", checkpoint=args.checkpoint)
        print(report.to_text(), end="")
        if not report.passed:
            print(f"❌ 未通过验收阈值: {', '.join(report.violations)}", file=sys.stderr)
            return EXIT_FAILURE
    elif args.command == 'plot':
        for path in pipeline.run("plot"):
            print(path)
    elif args.command == 'verify':
        report = pipeline.run("verify", only=args.suite)
        print(report.to_text(), end="")
        if not report.passed:
            return EXIT_FAILURE
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    try:
        return run(args)
    except ConfigError as e:
        logger.error(f"配置错误: {e}")
        print(f"❌ 配置错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n👋 已中断", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"{args.command} 失败: {type(e).__name__}: {e}")
        print(f"❌ {args.command} 失败: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
