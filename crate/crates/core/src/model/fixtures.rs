//! Hand-specified tabular models with values small enough to check by hand.

use super::TabularModel;
use crate::tokenizer::ScaleSchedule;

/// Two `1x1` scales, `V = 2`, two classes.
///
/// | class | `p(r_0)`     | `p(r_1 \| r_0 = 0)` | `p(r_1 \| r_0 = 1)` |
/// |-------|--------------|---------------------|---------------------|
/// | 0     | [0.75, 0.25] | [0.6, 0.4]          | [0.2, 0.8]          |
/// | 1     | [0.5, 0.5]   | [0.3, 0.7]          | [0.9, 0.1]          |
///
/// For class 0 the prefix-marginal of `r_1` is exactly `[0.5, 0.5]`.
pub fn m1() -> TabularModel {
    let schedule = ScaleSchedule::new(vec![(1, 1), (1, 1)]).unwrap();
    TabularModel::from_tables(
        schedule,
        2,
        2,
        vec![
            vec![vec![0.75, 0.25], vec![0.6, 0.4, 0.2, 0.8]],
            vec![vec![0.5, 0.5], vec![0.3, 0.7, 0.9, 0.1]],
        ],
    )
    .unwrap()
}

/// One `1x1` scale, `V = 2`, classes with rows `[0.8, 0.2]` and `[0.2, 0.8]`.
pub fn two_class_single_scale() -> TabularModel {
    let schedule = ScaleSchedule::new(vec![(1, 1)]).unwrap();
    TabularModel::from_tables(
        schedule,
        2,
        2,
        vec![vec![vec![0.8, 0.2]], vec![vec![0.2, 0.8]]],
    )
    .unwrap()
}
