"""GP-learned energy-injection balance control for underactuated pendulums."""

__version__ = "0.1.0"

from .config import ScenarioConfig, load_scenario
from .control import BalanceController, GainSchedule, GpDynamics, PeicPartition, SumOfSines
from .dynamics import RobotModel, NominalModel, furuta_model, three_link_model
from .gp import GpModel, train_gp
from .sim import Disturbance, EpisodeLog, Scenario, TruePlant, run_episode

__all__ = [
    "BalanceController", "Disturbance", "EpisodeLog", "GainSchedule", "GpDynamics", "GpModel",
    "NominalModel", "PeicPartition", "RobotModel", "Scenario", "ScenarioConfig", "SumOfSines",
    "TruePlant", "furuta_model", "load_scenario", "run_episode", "three_link_model", "train_gp",
]
