//! Published figures used as comparison targets by `pspot report`.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub map_retrieval: f64,
    pub map_spotting: f64,
}

/// Configuration ablation: dense vs filtered search, black vs texture query canvas.
pub const CONFIGURATIONS: [ReferenceRow; 3] = [
    ReferenceRow {
        name: "Dense + BlackCanv.",
        map_retrieval: 0.286,
        map_spotting: 0.139,
    },
    ReferenceRow {
        name: "NonText clf + BlackCanv.",
        map_retrieval: 0.300,
        map_spotting: 0.143,
    },
    ReferenceRow {
        name: "NonText clf + TemplCanv.",
        map_retrieval: 0.386,
        map_spotting: 0.173,
    },
];

/// Earlier hand-crafted-feature system (4096-D descriptors).
pub const PRIOR_SYSTEM: ReferenceRow = ReferenceRow {
    name: "Prior system (VLAD/FV + PQ)",
    map_retrieval: 0.580,
    map_spotting: 0.157,
};

/// Region-classifier test-set targets per level: `(k, non-text recall, accuracy)`.
pub const FILTER_TARGETS: [(u8, f64, f64); 3] = [(3, 0.997, 0.975), (4, 0.991, 0.970), (5, 0.985, 0.953)];

/// Descriptor width of the prior system; ours is 256.
pub const PRIOR_DESCRIPTOR_DIM: usize = 4096;

/// Tolerance for matching the best configuration on the full dataset.
pub const MAP_TOLERANCE: f64 = 0.05;

use super::EvalReport;

#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> TrendCheck {
    TrendCheck {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Ordering expected between the three configurations, plus closeness of the
/// best one to its published figures.
pub fn trend_checks(dense_black: &EvalReport, nontext_black: &EvalReport, nontext_texture: &EvalReport) -> Vec<TrendCheck> {
    let pair = |r: &EvalReport| format!("{:.3}/{:.3}", r.map_retrieval, r.map_spotting);
    let best = &CONFIGURATIONS[2];
    vec![
        check(
            "texture canvas beats black canvas on both tasks",
            nontext_texture.map_retrieval > nontext_black.map_retrieval
                && nontext_texture.map_spotting > nontext_black.map_spotting,
            format!("{} vs {}", pair(nontext_texture), pair(nontext_black)),
        ),
        check(
            "non-text filtering does not hurt either task",
            nontext_black.map_retrieval >= dense_black.map_retrieval
                && nontext_black.map_spotting >= dense_black.map_spotting,
            format!("{} vs {}", pair(nontext_black), pair(dense_black)),
        ),
        check(
            "best configuration within tolerance of the published figures",
            (nontext_texture.map_retrieval - best.map_retrieval).abs() <= MAP_TOLERANCE
                && (nontext_texture.map_spotting - best.map_spotting).abs() <= MAP_TOLERANCE,
            format!(
                "{} vs {:.3}/{:.3} (±{MAP_TOLERANCE})",
                pair(nontext_texture),
                best.map_retrieval,
                best.map_spotting
            ),
        ),
    ]
}
