"""
JSONL rollout and prompt dumps.

A rollout dump holds one record per prompt group: the prompt fields, rewards,
advantages and, per rollout, every token with its TokenTerm values. Runs write them to
<out>/rollouts.jsonl when dump_rollouts is set.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Union

from .models import GroupBatch, Prompt

logger = logging.getLogger(__name__)

ROLLOUT_DUMP = 'rollouts.jsonl'
PROMPT_DUMP = 'prompts.jsonl'
HELDOUT_PROMPT_DUMP = 'heldout_prompts.jsonl'


def write_jsonl(path: Union[str, Path], records: Iterable[Dict], append: bool = False) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'a' if append else 'w') as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"could not write {path}: {e}") from e
    return path


def write_prompts(path: Union[str, Path], prompts: Iterable[Prompt]) -> Path:
    return write_jsonl(path, (p.to_record() for p in prompts))


def read_prompts(path: Union[str, Path]) -> List[Prompt]:
    return [Prompt.from_record(r) for r in DumpReader().iter_file(Path(path))]


class DumpReader:
    """Reads rollout dumps, skipping lines that are not valid JSON objects."""

    def __init__(self, name_filter: Optional[str] = None):
        self.name_filter = name_filter
        self.skipped = 0

    def find_dump_files(self, root: Union[str, Path]) -> List[Path]:
        """A single file, or every *.jsonl below a run directory."""
        root = Path(root)
        if root.is_file():
            return [root]
        if not root.exists():
            return []

        files = []
        for f in root.rglob("*.jsonl"):
            if f.name in (PROMPT_DUMP, HELDOUT_PROMPT_DUMP):
                continue
            if self.name_filter and self.name_filter.lower() not in str(f).lower():
                continue
            files.append(f)
        return sorted(files)

    def iter_file(self, path: Path) -> Iterator[Dict]:
        try:
            with open(path, 'r') as f:
                for number, line in enumerate(f, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError:
                        self.skipped += 1
                        logger.warning("%s:%d: skipping malformed line", path, number)
                        continue
                    if not isinstance(record, dict):
                        self.skipped += 1
                        continue
                    yield record
        except OSError as e:
            raise OSError(f"could not read {path}: {e}") from e

    def iter_records(self, root: Union[str, Path]) -> Iterator[Dict]:
        for path in self.find_dump_files(root):
            yield from self.iter_file(path)

    def iter_tokens(self, root: Union[str, Path]) -> Iterator[Dict]:
        """Flattened per-token records (token id, pi, weight, ...) from group records."""
        for record in self.iter_records(root):
            for rollout in record.get('rollouts', []):
                for token in rollout.get('tokens', []):
                    if 'token' in token and 'pi' in token:
                        yield token


def group_record(batch: GroupBatch, step: Optional[int] = None) -> Dict:
    """Raw group contents (no per-token terms), used for aborted-step dumps."""
    record = batch.prompt.to_record()
    record.update({
        'outputs': [list(o) for o in batch.outputs],
        'rewards': [float(r) for r in batch.rewards],
        'logp_old': [[float(x) for x in lp] for lp in batch.logp_old],
        'logp_ref': [[float(x) for x in lp] for lp in batch.logp_ref],
    })
    if step is not None:
        record['step'] = step
    return record
