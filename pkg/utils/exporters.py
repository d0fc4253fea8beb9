import json
import math
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from utils.helpers import format_duration

TOOL_VERSION = '0.3.0'
MANIFEST_NAME = 'run_manifest.json'


def _plain(value):
    """JSON-safe form of numpy scalars, paths, enums and NaN."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        value = value.item()
    if hasattr(value, 'value') and not isinstance(value, (int, float, str, bool)):
        return value.value
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def append_jsonl(path, record):
    """Appends one record as a JSON line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(_plain(record)) + '\n')
    return path


def read_jsonl(path):
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def format_stats_table(stats):
    """Category counts and shares per split, one tab-separated row per category."""
    splits = stats.splits
    header = ['category']
    for s in splits:
        header += [s, f'{s}_pct']
    lines = ['\t'.join(header)]
    for name in stats.category_names:
        row = [name]
        for s in splits:
            row += [str(stats.count(s, name)), f'{stats.share(s, name):.3f}']
        lines.append('\t'.join(row))
    total = ['total']
    for s in splits:
        total += [str(stats.total(s)), f'{100.0 if stats.total(s) else 0.0:.3f}']
    lines.append('\t'.join(total))
    return '\n'.join(lines)


def write_stats_table(stats, output_path):
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, 'w', encoding='utf-8') as f:
        f.write(format_stats_table(stats) + '\n')
    return output_path


def write_text(text, output_path):
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, 'w', encoding='utf-8') as f:
        f.write(text if text.endswith('\n') else text + '\n')
    return output_path


def write_frame(df, output_path):
    """DataFrame as TSV, NaN written as "nan"."""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(output_path, sep='\t', index=False, na_rep='nan', float_format='%.6f')
    return output_path


def write_run_manifest(out_dir, command, config, seed, inputs, outputs, wall_time_s):
    """Writes run_manifest.json next to a command's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        'command': command,
        'config': config,
        'seed': seed,
        'inputs': inputs,
        'outputs': outputs,
        'tool_version': TOOL_VERSION,
        'python': sys.version.split()[0],
        'platform': platform.platform(),
        'created_at': datetime.now(timezone.utc).isoformat(timespec='seconds'),
        'wall_time_s': round(float(wall_time_s), 3),
        'wall_time': format_duration(wall_time_s),
    }
    path = out_dir / MANIFEST_NAME
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_plain(manifest), f, indent=2, sort_keys=True)
        f.write('\n')
    return path
