default_seed = 10

# compartment order used by every flat representation
state_names = ("S_H", "S_L", "I_AH", "I_AL", "I_CH", "I_CL", "T_H", "T_L", "P")
control_names = ("u_P", "u_T")

# published MSM setting, rates per month
default_model_params = {
    "alpha_h": 28.0,
    "alpha_l": 250.0,
    "mu": 1.0 / 360.0,
    "delta_a": 0.17,        # estimate
    "delta_c": 8.5e-3,      # estimate
    "rho_h": 0.0,
    "rho_l": 0.0,
    "prep_dropout": 0.0,    # x
    "tap_dropout": 0.0,     # y
    "baseline_tap": 0.00148,
    "lambda_h": 40.9,
    "lambda_l": 4.09,
    "beta_a": 0.015,
    "beta_c": 0.001,
    "pi_own": 0.0,
    "r_b": 0.8 / 0.2,
}

# budget functional coefficients
default_cost_params = {
    "tap_treatment": 1299.0,
    "prep_treatment": 776.0,
    "tap_enrollment": 266.0,
    "prep_enrollment": 213.0,
    "discount_rate": 0.0,
}

# provisional low-prevalence outbreak in 100,000 at-risk MSM
default_initial_state = {
    "S_H": 9800.0,
    "S_L": 89850.0,
    "I_AH": 100.0,
    "I_AL": 50.0,
    "I_CH": 150.0,
    "I_CL": 50.0,
    "T_H": 0.0,
    "T_L": 0.0,
    "P": 0.0,
}

default_x_values = (0.0, 1.0 / 60.0, 1.0 / 24.0, 1.0 / 12.0)
default_horizon = 600.0
default_interval = 12.0
default_collocation_points = 5
default_budget_limit = 2.0e6

# calibration targets and search box
default_prevalence_target = 0.20
default_treated_target = 0.25
default_contact_ratio = 10.0
default_lambda_box = (0.1, 20.0)
default_tap_box = (1e-5, 0.1)
default_equilibrium_horizon = 5000.0
default_equilibrium_tol = 1e-8

# solver
default_max_iter = 500
default_constraint_tol = 1e-6
default_kkt_tol = 1e-5
default_step_tol = 1e-12
default_fd_step = 1e-6
# QP subproblems above this many variables go to the sparse solver
default_dense_qp_limit = 3000

# oracle
default_rel_tol = 1e-9
default_abs_tol = 1e-9

# controls are carried in the NLP in units of this rate
default_control_scale = 1e-3
default_aggressive_control = 1e-3
