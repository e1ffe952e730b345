"""Tests for the checksummed run state."""
import json

from rsc_engine.state import RunState


class TestRunState:

    def test_missing_file(self, tmp_path):
        assert RunState(tmp_path / 'state.json').load() is None

    def test_save_and_load(self, tmp_path):
        path = tmp_path / 'runs' / 'state.json'
        RunState(path).save({'status': 'in_progress', 'iteration': 3})
        loaded = RunState(path).load()
        assert loaded['status'] == 'in_progress'
        assert loaded['iteration'] == 3
        assert 'checksum' in loaded and 'last_updated' in loaded

    def test_tampered_file_is_ignored(self, tmp_path):
        path = tmp_path / 'state.json'
        RunState(path).save({'status': 'in_progress'})
        document = json.loads(path.read_text())
        document['status'] = 'completed'
        path.write_text(json.dumps(document))
        assert RunState(path).load() is None

    def test_corrupt_json_is_ignored(self, tmp_path):
        path = tmp_path / 'state.json'
        path.write_text('{not json')
        assert RunState(path).load() is None

    def test_stage_progress(self, tmp_path):
        state = RunState(tmp_path / 'state.json')
        state.mark_stage_started(1, [1])
        assert state.is_in_progress()
        state.mark_stage_complete(1, 10)
        state.mark_stage_complete(1, 10)
        state.mark_stage_started(2, [1, 2])
        state.mark_stage_complete(2, 20)
        loaded = RunState(state.state_file).load()
        assert loaded['completed_stages'] == [1, 2]
        assert loaded['iteration'] == 20

    def test_cells_are_keyed_by_hash(self, tmp_path):
        state = RunState(tmp_path / 'state.json')
        rows = [{'pixel_size': 13, 'mpjpe': 1.0}]
        state.mark_cell_complete('RA', 'abc', rows)
        again = RunState(state.state_file)
        again.load()
        assert again.is_cell_complete('RA', 'abc')
        assert not again.is_cell_complete('RA', 'def')
        assert not again.is_cell_complete('Ba', 'abc')
        assert again.cell_rows('RA') == rows
        assert again.cell_rows('Ba') == []

    def test_run_complete_and_clear(self, tmp_path):
        state = RunState(tmp_path / 'state.json')
        state.mark_run_complete(success=False)
        assert RunState(state.state_file).load()['status'] == 'failed'
        state.clear()
        assert not state.state_file.exists()
        assert state.state == {}
