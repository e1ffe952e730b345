"""Checksummed run state for resumable training and ablation runs."""
import hashlib
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional


logger = logging.getLogger('rsc_engine')


class RunState:
    """Progress record written next to run outputs.

    The file carries an md5 of its own content; a mismatching or corrupt file
    is ignored so a run starts over instead of trusting stale progress.
    """

    def __init__(self, state_file: Path):
        """Initialize run state.

        Args:
            state_file: Path to state.json file
        """
        self.state_file = Path(state_file)
        self.state: Dict[str, Any] = {}

    def load(self) -> Optional[Dict[str, Any]]:
        """Load state from file with checksum verification.

        Returns:
            State dictionary if valid, None otherwise
        """
        if not self.state_file.exists():
            return None

        try:
            with open(self.state_file, 'r') as f:
                data = json.load(f)
        except (json.JSONDecodeError, OSError) as e:
            logger.error(f"Failed to load state file: {e}")
            return None

        if not isinstance(data, dict):
            logger.warning("State file is not a mapping, ignoring state")
            return None

        if 'checksum' in data:
            body = {k: v for k, v in data.items() if k != 'checksum'}
            if data['checksum'] != self._checksum(body):
                logger.warning("State file checksum mismatch, ignoring state")
                return None

        self.state = data
        logger.info(f"Loaded run state: {self.state.get('status', 'unknown')}")
        return self.state

    def save(self, state: Dict[str, Any]) -> None:
        body = {k: v for k, v in state.items() if k != 'checksum'}
        body['last_updated'] = datetime.now().isoformat()
        body['checksum'] = self._checksum(body)

        self.state_file.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.state_file.with_suffix('.tmp')
        with open(tmp, 'w') as f:
            json.dump(body, f, indent=2, sort_keys=True)
        tmp.replace(self.state_file)

        self.state = body
        logger.debug(f"State saved: {body.get('status', 'unknown')}")

    def update(self, **kwargs) -> None:
        self.state.update(kwargs)
        self.save(self.state)

    def clear(self) -> None:
        if self.state_file.exists():
            self.state_file.unlink()
            logger.info("State file cleared")
        self.state = {}

    def is_in_progress(self) -> bool:
        return self.state.get('status') == 'in_progress'

    # --- training stages ---
    def mark_stage_started(self, stage_index: int, ranges: List[int]) -> None:
        self.update(status='in_progress', current_stage=stage_index, current_ranges=list(ranges))

    def mark_stage_complete(self, stage_index: int, iteration: int) -> None:
        completed = self.state.get('completed_stages', [])
        if stage_index not in completed:
            completed.append(stage_index)
        self.update(completed_stages=completed, current_stage=None, iteration=iteration)

    # --- ablation cells ---
    def is_cell_complete(self, cell: str, cell_hash: str) -> bool:
        """True when the cell finished under exactly this configuration."""
        return self.state.get('cells', {}).get(cell, {}).get('hash') == cell_hash

    def mark_cell_complete(self, cell: str, cell_hash: str, rows: List[Dict[str, Any]]) -> None:
        cells = dict(self.state.get('cells', {}))
        cells[cell] = {'hash': cell_hash, 'rows': rows}
        self.update(status='in_progress', cells=cells)

    def cell_rows(self, cell: str) -> List[Dict[str, Any]]:
        return list(self.state.get('cells', {}).get(cell, {}).get('rows', []))

    def mark_run_complete(self, success: bool) -> None:
        self.update(
            status='completed' if success else 'failed',
            completed_at=datetime.now().isoformat()
        )

    @staticmethod
    def _checksum(state: Dict[str, Any]) -> str:
        payload = json.dumps(state, sort_keys=True)
        return hashlib.md5(payload.encode()).hexdigest()
