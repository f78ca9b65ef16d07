//! Published simulation summaries, kept for side-by-side comparison with
//! replicated tables.

use crate::simgen::CaseId;

/// Row order of the selection table.
pub const TABLE1_ROWS: [&str; 12] =
    ["Cvar", "Cfix", "Size", "U", "O", "TP", "FP", "TPvar", "FPvar", "TPfix", "FPfix", "MMMS"];

type Cell = Option<(f64, Option<f64>)>;

const fn v(x: f64) -> Cell {
    Some((x, None))
}

const fn s(x: f64, sd: f64) -> Cell {
    Some((x, Some(sd)))
}

const NA: Cell = None;

/// `(case, n, rho)` columns of the selection table with their 12 rows.
const TABLE1: [(CaseId, usize, f64, [Cell; 12]); 11] = [
    (
        CaseId::I,
        100,
        0.1,
        [
            v(0.965),
            v(0.926),
            s(5.01, 0.79),
            v(0.00),
            v(0.01),
            s(5.00, 0.79),
            s(0.01, 0.06),
            s(2.93, 0.54),
            s(0.10, 0.04),
            s(1.92, 0.33),
            s(0.04, 0.28),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::I,
        100,
        0.5,
        [
            v(0.904),
            v(0.812),
            s(6.43, 1.23),
            v(0.05),
            v(0.19),
            s(4.99, 1.18),
            s(0.81, 0.25),
            s(2.87, 0.75),
            s(0.15, 0.09),
            s(1.84, 0.48),
            s(0.80, 0.42),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::I,
        200,
        0.5,
        [
            v(0.996),
            v(0.912),
            s(5.02, 0.54),
            v(0.00),
            v(0.02),
            s(5.00, 0.54),
            s(0.02, 0.01),
            s(2.97, 0.42),
            s(0.09, 0.06),
            s(1.92, 0.22),
            s(0.14, 0.21),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::II,
        100,
        0.3,
        [
            v(0.952),
            NA,
            s(5.12, 0.13),
            v(0.00),
            v(0.08),
            s(4.97, 0.13),
            s(0.09, 0.01),
            s(4.98, 0.11),
            s(0.03, 0.08),
            NA,
            s(0.06, 0.14),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::II,
        200,
        0.3,
        [
            v(0.986),
            NA,
            s(5.04, 0.01),
            v(0.00),
            v(0.01),
            s(5.00, 0.01),
            s(0.04, 0.00),
            s(5.00, 0.04),
            s(0.01, 0.00),
            NA,
            s(0.03, 0.04),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::III,
        100,
        0.4,
        [
            NA,
            v(0.938),
            s(5.25, 0.13),
            v(0.00),
            v(0.11),
            s(4.96, 0.12),
            s(0.15, 0.01),
            NA,
            s(0.03, 0.08),
            s(4.93, 0.15),
            s(0.10, 0.12),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::III,
        200,
        0.4,
        [
            NA,
            v(0.969),
            s(5.01, 0.01),
            v(0.00),
            v(0.03),
            s(5.00, 0.01),
            s(0.05, 0.01),
            NA,
            s(0.01, 0.01),
            s(5.00, 0.04),
            s(0.02, 0.01),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::IV,
        100,
        0.4,
        [
            v(0.976),
            v(0.854),
            s(4.95, 0.63),
            v(0.02),
            v(0.03),
            s(4.93, 0.59),
            s(0.03, 0.19),
            s(2.82, 0.48),
            s(0.01, 0.08),
            s(1.96, 0.26),
            s(0.16, 0.40),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::IV,
        200,
        0.5,
        [
            v(0.992),
            v(0.936),
            s(4.98, 0.40),
            v(0.01),
            v(0.00),
            s(4.97, 0.40),
            s(0.00, 0.00),
            s(2.92, 0.34),
            s(0.00, 0.00),
            s(1.98, 0.17),
            s(0.06, 0.23),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::V,
        100,
        0.4,
        [
            v(0.925),
            v(0.810),
            s(4.87, 0.96),
            v(0.03),
            v(0.04),
            s(4.81, 0.93),
            s(0.05, 0.19),
            s(2.79, 0.65),
            s(0.04, 0.21),
            s(1.88, 0.43),
            s(0.20, 0.42),
            s(5.0, 0.0),
        ],
    ),
    (
        CaseId::V,
        200,
        0.5,
        [
            v(0.998),
            v(0.914),
            s(4.99, 0.22),
            v(0.00),
            v(0.00),
            s(4.99, 0.22),
            s(0.00, 0.00),
            s(2.97, 0.31),
            s(0.01, 0.05),
            s(1.99, 0.09),
            s(0.08, 0.27),
            s(5.0, 0.0),
        ],
    ),
];

/// Columns of the published selection table, in order.
pub fn table1_columns() -> Vec<(CaseId, usize, f64)> {
    TABLE1.iter().map(|c| (c.0, c.1, c.2)).collect()
}

/// Published `(value, robust sd)` for a selection-table cell.
pub fn table1_value(case: CaseId, n: usize, rho: f64, row: &str) -> Cell {
    let r = TABLE1_ROWS.iter().position(|&x| x == row)?;
    TABLE1.iter().find(|c| c.0 == case && c.1 == n && c.2 == rho).and_then(|c| c.3[r])
}

/// `[initial mean-abs, initial root-mean-sq, refined mean-abs, refined root-mean-sq]`
/// for oracle and practical estimates.
type Row2 = (&'static str, [f64; 4], [f64; 4]);

const TABLE2_I: [Row2; 6] = [
    ("beta11", [0.0374, 0.0623, 0.0253, 0.0387], [0.0572, 0.0806, 0.0266, 0.0458]),
    ("beta12", [0.0507, 0.0642, 0.0296, 0.0417], [0.0662, 0.0768, 0.0330, 0.0500]),
    ("beta0", [0.1678, 0.2410, 0.0872, 0.1526], [0.1922, 0.2863, 0.1020, 0.1902]),
    ("beta21", [0.1697, 0.2497, 0.1098, 0.1805], [0.2066, 0.2819, 0.1243, 0.2111]),
    ("beta22", [0.1526, 0.2433, 0.1151, 0.1568], [0.1815, 0.2760, 0.1261, 0.1957]),
    ("beta23", [0.1804, 0.2819, 0.1241, 0.2007], [0.2119, 0.2939, 0.1317, 0.2293]),
];

const TABLE2_II: [Row2; 6] = [
    ("beta0", [0.1748, 0.2571, 0.1042, 0.1794], [0.2254, 0.3179, 0.1220, 0.2535]),
    ("beta21", [0.1939, 0.2703, 0.0859, 0.1389], [0.2316, 0.3315, 0.1015, 0.2220]),
    ("beta22", [0.1532, 0.2357, 0.1029, 0.1473], [0.1964, 0.3003, 0.1221, 0.2088]),
    ("beta23", [0.1710, 0.2381, 0.1019, 0.1462], [0.2156, 0.2901, 0.1215, 0.2383]),
    ("beta24", [0.2074, 0.3352, 0.1181, 0.1889], [0.2473, 0.3880, 0.1243, 0.2565]),
    ("beta25", [0.2425, 0.3562, 0.1252, 0.2441], [0.2680, 0.4055, 0.1362, 0.2590]),
];

const TABLE2_III: [Row2; 6] = [
    ("beta11", [0.0136, 0.0264, 0.0109, 0.0223], [0.0142, 0.0402, 0.0136, 0.0387]),
    ("beta12", [0.0125, 0.0200, 0.0118, 0.0141], [0.0144, 0.0458, 0.0138, 0.0374]),
    ("beta13", [0.0256, 0.0400, 0.0162, 0.0332], [0.0352, 0.0538, 0.0286, 0.0469]),
    ("beta14", [0.0206, 0.0360, 0.0175, 0.0282], [0.0327, 0.0565, 0.0249, 0.0489]),
    ("beta15", [0.0300, 0.0400, 0.0265, 0.0346], [0.0525, 0.0648, 0.0430, 0.0608]),
    ("beta0", [0.1067, 0.0985, 0.1038, 0.0938], [0.1215, 0.1126, 0.1156, 0.1101]),
];

/// Published estimation errors for `(case, parameter)`; `practical` picks the
/// estimate after screening and selection. Only `n = 100, rho = 0.1` was
/// published.
pub fn table2_value(case: CaseId, n: usize, rho: f64, parameter: &str, practical: bool) -> Option<[f64; 4]> {
    if n != 100 || rho != 0.1 {
        return None;
    }
    let rows: &[Row2] = match case {
        CaseId::I => &TABLE2_I,
        CaseId::II => &TABLE2_II,
        CaseId::III => &TABLE2_III,
        _ => return None,
    };
    rows.iter().find(|r| r.0 == parameter).map(|r| if practical { r.2 } else { r.1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        assert_eq!(table1_value(CaseId::I, 100, 0.1, "Cvar"), Some((0.965, None)));
        assert_eq!(table1_value(CaseId::III, 200, 0.4, "Size"), Some((5.01, Some(0.01))));
        assert_eq!(table1_value(CaseId::III, 200, 0.4, "Cvar"), None);
        assert_eq!(table1_value(CaseId::I, 150, 0.1, "Cvar"), None);
        assert_eq!(table1_columns().len(), 11);
        assert_eq!(table2_value(CaseId::I, 100, 0.1, "beta0", false), Some([0.1678, 0.2410, 0.0872, 0.1526]));
        assert_eq!(table2_value(CaseId::III, 100, 0.1, "beta15", true).unwrap()[3], 0.0608);
        assert_eq!(table2_value(CaseId::IV, 100, 0.1, "beta0", false), None);
    }
}
