#!/usr/bin/env python3
"""
训练指标分析工具
读取各次运行的 metrics.csv，汇总并比较最终的 ELBO
"""

import logging
import os
from typing import Dict, List

import pandas as pd

import tensor_store

logger = logging.getLogger(__name__)


def load_run_metrics(run_dir: str) -> pd.DataFrame:
    """加载单次运行的指标数据"""
    csv_file = os.path.join(run_dir, "metrics.csv")

    if not os.path.exists(csv_file):
        raise FileNotFoundError(f"数据文件不存在: {csv_file}")

    df = pd.read_csv(csv_file)
    return df.sort_values(['step', 'split'], kind='stable').reset_index(drop=True)


def run_label(run_dir: str) -> str:
    """Model kind from the newest checkpoint manifest, else the directory name"""
    checkpoints = os.path.join(run_dir, "checkpoints")
    if os.path.isdir(checkpoints):
        steps = sorted(d for d in os.listdir(checkpoints) if d.startswith("step_"))
        if steps:
            manifest = tensor_store.read_manifest(os.path.join(checkpoints, steps[-1]))
            return f"{manifest['config']['model']} ({os.path.basename(os.path.normpath(run_dir))})"
    return os.path.basename(os.path.normpath(run_dir))


def summarize_run(run_dir: str) -> Dict[str, object]:
    df = load_run_metrics(run_dir)
    train = df[df['split'] == 'train']
    test = df[df['split'] == 'test']
    return {
        'run': run_label(run_dir),
        'steps': int(df['step'].max()) if len(df) else 0,
        'final_train_elbo': float(train['elbo_per_example'].iloc[-1]) if len(train) else float('nan'),
        'final_test_elbo': float(test['elbo_per_example'].iloc[-1]) if len(test) else float('nan'),
        'best_test_elbo': float(test['elbo_per_example'].max()) if len(test) else float('nan'),
        'final_test_kl': float(test['kl_total'].iloc[-1]) if len(test) else float('nan'),
        'skips': int(df['skips'].max()) if len(df) else 0,
    }


def compare_runs(run_dirs: List[str]) -> pd.DataFrame:
    """每次运行一行，按最终测试ELBO从高到低排序"""
    rows = [summarize_run(d) for d in run_dirs]
    df = pd.DataFrame(rows)
    if df.empty:
        return df
    return df.sort_values('final_test_elbo', ascending=False, na_position='last').reset_index(drop=True)


def generate_report(run_dirs: List[str]) -> pd.DataFrame:
    """生成分析报告"""
    df = compare_runs(run_dirs)
    print(f"\n{'='*60}")
    print("ELBO 对比报告")
    print(f"运行数: {len(df)}")
    print(f"{'='*60}")

    print("\n📈 最终测试 ELBO / example（高者更好）:")
    for i, row in enumerate(df.itertuples(index=False), 1):
        print(f"  {i:2d}. {row.run}: {row.final_test_elbo:.3f} "
              f"(train {row.final_train_elbo:.3f}, best test {row.best_test_elbo:.3f}, "
              f"steps {row.steps}, skips {row.skips})")

    if len(df) >= 2:
        gap = df['final_test_elbo'].iloc[0] - df['final_test_elbo'].iloc[1]
        print(f"\n📊 第一名领先: {gap:.3f} nats")

    logger.info(f"ELBO report over {len(df)} run(s)")
    return df
