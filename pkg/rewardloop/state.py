import json
import logging
import os
from enum import Enum
from typing import Tuple

from rewardloop.paths import get_run_state_path
from rewardloop.utils import ensure_dir_exist

logger = logging.getLogger(__name__)


class RunState(Enum):
    NOT_STARTED = "not_started"
    ROUND_DONE = "round_done"
    FINISHED = "finished"


class RunMachine:
    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        self._state_file = get_run_state_path(run_dir)

    def get_state(self) -> Tuple[RunState, int]:
        """
        Reads the current state and the last completed round from the
        state file.
        """
        try:
            if not os.path.exists(self._state_file):
                return RunState.NOT_STARTED, 0

            with open(self._state_file, "r") as f:
                data = json.load(f)
                return RunState(data["state"]), int(data["round"])
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            logger.error("Error reading the run state: %s", e)
            return RunState.NOT_STARTED, 0

    def set_state(self, state: RunState, round_index: int) -> None:
        """
        Saves the state to a file; a partial write never replaces the old one.
        """
        ensure_dir_exist(self.run_dir)
        tmp = f"{self._state_file}.tmp"
        with open(tmp, "w") as f:
            json.dump({"state": state.value, "round": round_index}, f)
        os.replace(tmp, self._state_file)
