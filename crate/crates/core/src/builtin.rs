//! Reward machines, maps and constraints shipped with the crate.

pub const FOUR_BUTTONS_RM: &str = include_str!("../data/rms/four_buttons.rm");
pub const COOP_BUTTONS_RM: &str = include_str!("../data/rms/coop_buttons.rm");
pub const REPAIRS_RM: &str = include_str!("../data/rms/repairs.rm");

pub const FOUR_BUTTONS_MAP: &str = include_str!("../data/maps/four_buttons.map");
pub const COOP_BUTTONS_MAP: &str = include_str!("../data/maps/coop_buttons.map");
pub const REPAIRS_MAP: &str = include_str!("../data/maps/repairs.map");

pub const FOUR_BUTTONS_CONSTRAINTS: &str = include_str!("../data/constraints/four_buttons.txt");
pub const COOP_BUTTONS_CONSTRAINTS: &str = include_str!("../data/constraints/coop_buttons.txt");
pub const REPAIRS_CONSTRAINTS: &str = include_str!("../data/constraints/repairs.txt");
