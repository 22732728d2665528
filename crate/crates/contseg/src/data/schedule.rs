//! Class-incremental task schedules.
//!
//! A schedule carves an ordered class list into a base step of `B` classes
//! followed by equal increments of `I`, written `B-I` (e.g. 15-5 over 20
//! classes is two steps; 15-1 is six).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    all_classes: Vec<u32>,
    base: usize,
    increment: usize,
    step_classes: Vec<Vec<u32>>,
}

impl TaskSchedule {
    pub fn steps(&self) -> usize {
        self.step_classes.len()
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn increment(&self) -> usize {
        self.increment
    }

    pub fn all_classes(&self) -> &[u32] {
        &self.all_classes
    }

    /// Classes introduced at `step` (1-based).
    pub fn classes_at(&self, step: usize) -> &[u32] {
        &self.step_classes[step - 1]
    }

    /// All classes learned in steps `1..=step`, in introduction order.
    pub fn classes_up_to(&self, step: usize) -> Vec<u32> {
        self.step_classes[..step]
            .iter()
            .flat_map(|c| c.iter().copied())
            .collect()
    }

    /// Classes from steps strictly before `step`.
    pub fn old_classes(&self, step: usize) -> Vec<u32> {
        self.classes_up_to(step.saturating_sub(1))
    }

    /// The 1-based step that introduces `class`, if it is scheduled at all.
    pub fn step_of_class(&self, class: u32) -> Option<usize> {
        self.step_classes
            .iter()
            .position(|c| c.contains(&class))
            .map(|i| i + 1)
    }
}

/// Build a `base`-then-`increment` schedule over classes `0..num_classes`.
pub fn build_schedule(num_classes: usize, base: usize, increment: usize) -> Result<TaskSchedule> {
    if base < 1 {
        return Err(Error::config("schedule base must be ≥ 1".to_string()));
    }
    if increment < 1 {
        return Err(Error::config("schedule increment must be ≥ 1".to_string()));
    }
    if base > num_classes {
        return Err(Error::config(format!(
            "schedule base {base} exceeds class count {num_classes}"
        )));
    }
    let rest = num_classes - base;
    if rest % increment != 0 {
        return Err(Error::config(format!(
            "schedule remainder: {num_classes} classes minus base {base} is not divisible by increment {increment}"
        )));
    }
    let all_classes: Vec<u32> = (0..num_classes as u32).collect();
    let mut step_classes = vec![all_classes[..base].to_vec()];
    let mut at = base;
    while at < num_classes {
        step_classes.push(all_classes[at..at + increment].to_vec());
        at += increment;
    }
    Ok(TaskSchedule {
        all_classes,
        base,
        increment,
        step_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_counts_for_reference_splits() {
        // (classes, base, increment) → steps.
        let cases = [
            (20, 19, 1, 2),
            (20, 15, 5, 2),
            (20, 15, 1, 6),
            (150, 100, 50, 2),
            (150, 100, 10, 6),
            (150, 100, 5, 11),
            (150, 50, 50, 3),
        ];
        for (c, b, i, t) in cases {
            let s = build_schedule(c, b, i).unwrap();
            assert_eq!(s.steps(), t, "schedule {b}-{i} over {c}");
            // Arithmetic identity T = 1 + (C − B)/I.
            assert_eq!(s.steps(), 1 + (c - b) / i);
        }
    }

    #[test]
    fn partition_properties() {
        let s = build_schedule(20, 15, 1).unwrap();
        assert_eq!(s.classes_at(1).len(), 15);
        for t in 2..=6 {
            assert_eq!(s.classes_at(t).len(), 1);
        }
        // Pairwise disjoint, union = all, introduction order canonical.
        let mut seen = Vec::new();
        for t in 1..=s.steps() {
            for &c in s.classes_at(t) {
                assert!(!seen.contains(&c), "class {c} assigned twice");
                seen.push(c);
            }
        }
        assert_eq!(seen, (0..20).collect::<Vec<u32>>());
        assert_eq!(s.classes_up_to(6), seen);
        assert_eq!(s.old_classes(2), s.classes_up_to(1));
        assert_eq!(s.step_of_class(14), Some(1));
        assert_eq!(s.step_of_class(17), Some(4));
        assert_eq!(s.step_of_class(99), None);
    }

    #[test]
    fn joint_schedule_is_single_step() {
        let s = build_schedule(8, 8, 1).unwrap();
        assert_eq!(s.steps(), 1);
        assert_eq!(s.classes_at(1).len(), 8);
        assert!(s.old_classes(1).is_empty());
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(build_schedule(20, 0, 1).is_err());
        assert!(build_schedule(20, 15, 0).is_err());
        assert!(build_schedule(20, 21, 1).is_err());
        // 20 − 15 = 5 not divisible by 2.
        assert!(build_schedule(20, 15, 2).is_err());
    }
}
