"""Ground-truth constants for the benchmark catalog.

Every recovery test compares against these same numbers, so they act as a
self-consistent round trip rather than as an external reference.

Lotka-Volterra and Lorenz use their textbook parameters. The F8 Crusader
model is the Garrard-Jordan cubic longitudinal model popularized by the
SINDy-with-control literature. The pathogenic-attack and insulin models are
repo-defined: the pathogen model is a 5-state cubic immune-response system
built to have exactly five nonlinear entries, and the insulin model is the
Bergman minimal model with an insulin compartment, time measured in 5-minute
samples.
"""

# Lotka-Volterra: x' = a x - b x y,  y' = -c y + d x y
LOTKA_A = 1.0
LOTKA_B = 0.1
LOTKA_C = 1.5
LOTKA_D = 0.075

# Lorenz
LORENZ_SIGMA = 10.0
LORENZ_RHO = 28.0
LORENZ_BETA = 8.0 / 3.0

# Bergman minimal model, per-minute textbook values
BERGMAN_P1 = 0.028735  # glucose effectiveness, 1/min
BERGMAN_P2 = 0.028344  # remote insulin decay, 1/min
BERGMAN_P3 = 5.035e-5  # insulin sensitivity gain, 1/min^2 per mU/L
BERGMAN_N = 5.0 / 54.0  # plasma insulin clearance, 1/min
BERGMAN_GB = 81.0  # basal glucose, mg/dL
BERGMAN_IB = 15.0  # basal insulin, mU/L
AID_SAMPLE_MINUTES = 5.0  # one dimensionless time unit

# Pathogenic attack (states: pathogen, plasma cells, antibodies, organ damage, drug)
PATHOGEN_GROWTH = 1.0
PATHOGEN_KILL = 1.0
PATHOGEN_DRUG_KILL = 0.5
PLASMA_STIMULATION = 2.0
PLASMA_DECAY = 1.5
PLASMA_BASELINE = 2.0
ANTIBODY_PRODUCTION = 1.0
ANTIBODY_DECAY = 1.5
ANTIBODY_BINDING = 0.5
DAMAGE_RATE = 0.5
DAMAGE_RECOVERY = 0.8
DRUG_CLEARANCE = 1.0

# F8 Crusader (Garrard & Jordan 1977)
F8_ALPHA = {  # alpha' = ...
    "alpha": -0.877,
    "q": 1.0,
    "alpha*q": -0.088,
    "alpha^2": 0.47,
    "theta^2": -0.019,
    "alpha^2*q": -1.0,
    "alpha^3": 3.846,
    "u": -0.215,
    "alpha^2*u": 0.28,
    "alpha*u^2": 0.47,
    "u^3": 0.63,
}
F8_Q = {  # q' = ...
    "alpha": -4.208,
    "q": -0.396,
    "alpha^2": -0.47,
    "alpha^3": -3.564,
    "u": -20.967,
    "alpha^2*u": 6.265,
    "alpha*u^2": 46.0,
    "u^3": 61.4,
}

# complexity rows: (nonlinear terms, polynomial order, states)
COMPLEXITY = {
    "aid": (1, 2, 3),
    "lorenz": (2, 2, 3),
    "lotka": (2, 2, 2),
    "pathogenic": (5, 3, 5),
    "f8": (8, 3, 3),
}

# Default integration step per system (dimensionless time units)
DEFAULT_DT = {
    "lorenz": 0.01,
    "lotka": 0.05,
    "f8": 0.01,
    "pathogenic": 0.05,
    "aid": 1.0,
}

# Hudson Bay Company lynx and hare pelts, thousands, 1900-1920
# (tabulated in Odum, Fundamentals of Ecology, 1953).
HUDSON_BAY_YEARS = tuple(range(1900, 1921))
HUDSON_BAY_HARE = (
    30.0, 47.2, 70.2, 77.4, 36.3, 20.6, 18.1, 21.4, 22.0, 25.4, 27.1,
    40.3, 57.0, 76.6, 52.3, 19.5, 11.2, 7.6, 14.6, 16.2, 24.7,
)
HUDSON_BAY_LYNX = (
    4.0, 6.1, 9.8, 35.2, 59.4, 41.7, 19.0, 13.0, 8.3, 9.1, 7.4,
    8.0, 12.3, 19.5, 45.7, 51.1, 29.7, 15.8, 9.7, 10.1, 8.6,
)
