//! Built-in scenario documents, embedded at compile time.
//!
//! `run <name>` falls back to these when `<name>` is not a path on disk;
//! `list-scenarios` prints the table below.

/// `(name, document, one-line description)` for every built-in scenario.
pub const BUILTINS: [(&str, &str, &str); 11] = [
    (
        "convergence_i",
        include_str!("../scenarios/convergence_i.cfg"),
        "transport accuracy ladder, no stabilization or reinitialization",
    ),
    (
        "convergence_ii",
        include_str!("../scenarios/convergence_ii.cfg"),
        "transport accuracy ladder with entropy stabilization",
    ),
    (
        "convergence_iii",
        include_str!("../scenarios/convergence_iii.cfg"),
        "transport accuracy ladder, full scheme with reinitialization",
    ),
    (
        "rotating_circle",
        include_str!("../scenarios/rotating_circle.cfg"),
        "circle profile in rigid rotation on an adaptive mesh",
    ),
    (
        "zalesak2d",
        include_str!("../scenarios/zalesak2d.cfg"),
        "slotted disk in rigid rotation",
    ),
    (
        "vortex2d",
        include_str!("../scenarios/vortex2d.cfg"),
        "circle stretched and recovered by a time-reversing vortex",
    ),
    (
        "bubble1",
        include_str!("../scenarios/bubble1.cfg"),
        "buoyant drop, moderate contrast, strong tension",
    ),
    (
        "bubble2",
        include_str!("../scenarios/bubble2.cfg"),
        "buoyant drop, large contrast, weak tension",
    ),
    (
        "buckling2d",
        include_str!("../scenarios/buckling2d.cfg"),
        "viscous jet coiling onto a rigid floor",
    ),
    (
        "bouncing_newtonian",
        include_str!("../scenarios/bouncing_newtonian.cfg"),
        "oil jet rebounding from a moving bath",
    ),
    (
        "kaye",
        include_str!("../scenarios/kaye.cfg"),
        "shear-thinning jet leaping from its own heap",
    ),
];

/// Document text of a built-in scenario, if `name` is one.
pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _, _)| *n == name).map(|(_, doc, _)| *doc)
}

/// Names of all built-in scenarios, in listing order.
pub fn names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _, _)| *n)
}
