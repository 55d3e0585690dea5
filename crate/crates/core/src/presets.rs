//! Bundled example models and problems.

pub const PENDULUM_MODEL: &str = include_str!("../data/pendulum.yaml");
pub const MOTOR_MODEL: &str = include_str!("../data/motor.yaml");
pub const PENDULUM_PROBLEM: &str = include_str!("../data/pendulum.problem.yaml");
pub const MOTOR_PROBLEM: &str = include_str!("../data/motor.problem.yaml");
pub const MOTOR_SCENARIO: &str = include_str!("../data/motor.scenario.yaml");
