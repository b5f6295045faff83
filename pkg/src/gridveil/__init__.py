"""Design and evaluation of stealthy AC false-data-injection attacks on power grids."""
from .designer import (AttackVector, DesignerOptions, SpoofedState, TargetOverload, assemble_attack_vector,
                       boundary_injections, design_nonoptimal, design_optimal, objective_value)
from .estimation import (MeasurementPlan, MeasurementSet, apply_attack, estimate_state,
                         generate_measurements, residual_analysis)
from .grid import Network, build_admittance, data_path, load_case, parse_case, validate_network
from .powerflow import OperatingPoint, VoltageState, solve_power_flow
from .scenario import ScenarioConfig, compare_attacks, load_config, run_scenario
from .zone import AttackZone, build_zone, classify_buses, load_zone, zone_from_sets, zone_report

__version__ = "0.1.0"
