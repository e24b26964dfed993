//! Transparency and interpretability questionnaire scoring.
//!
//! Each answer earns 0 (not applicable), 1 (partial) or 2 (total) points. A category
//! scores `100 * sum(points) / (2 * questions)` and the overall score is the plain mean
//! of the five category scores.
//!
//! Questionnaire files are line based:
//!
//! ```text
//! # comment
//! tool: Some Tool
//! [Functional Description]
//! 2 | Is it possible to identify the pipeline stages?
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum points per question.
pub const MAX_POINTS: u8 = 2;

pub const FULL_MARKS_QUESTIONNAIRE: &str = include_str!("../questionnaires/full_marks.txt");
pub const PUBLISHED_TOTALS_QUESTIONNAIRE: &str = include_str!("../questionnaires/published_totals.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    FunctionalDescription,
    StatisticalAnalysis,
    AlgorithmicTransparency,
    Interpretability,
    InternalAnalysis,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::FunctionalDescription,
        Category::StatisticalAnalysis,
        Category::AlgorithmicTransparency,
        Category::Interpretability,
        Category::InternalAnalysis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::FunctionalDescription => "Functional Description",
            Category::StatisticalAnalysis => "Statistical Analysis",
            Category::AlgorithmicTransparency => "Algorithmic Transparency",
            Category::Interpretability => "Interpretability",
            Category::InternalAnalysis => "Internal Analysis",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub points: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryAnswers {
    pub category: Category,
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub tool: String,
    /// In canonical category order.
    pub categories: Vec<CategoryAnswers>,
}

impl Questionnaire {
    pub fn n_questions(&self) -> usize {
        self.categories.iter().map(|c| c.questions.len()).sum()
    }

    pub fn category(&self, c: Category) -> Option<&CategoryAnswers> {
        self.categories.iter().find(|a| a.category == c)
    }
}

pub fn parse_questionnaire(text: &str) -> Result<Questionnaire> {
    let mut tool = None;
    let mut cats: Vec<CategoryAnswers> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |message: String| Error::Parse { line: i + 1, message };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("tool:") {
            if tool.is_some() {
                return Err(err("tool declared twice".into()));
            }
            tool = Some(rest.trim().to_string());
        } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let c = Category::parse(name).ok_or_else(|| err(format!("unknown category {name:?}")))?;
            if cats.iter().any(|a| a.category == c) {
                return Err(err(format!("category {:?} appears twice", c.name())));
            }
            cats.push(CategoryAnswers {
                category: c,
                questions: Vec::new(),
            });
        } else if let Some((pts, q)) = line.split_once('|') {
            let points: u8 = match pts.trim() {
                "0" => 0,
                "1" => 1,
                "2" => 2,
                other => return Err(err(format!("answer must be 0, 1 or 2, got {other:?}"))),
            };
            let current = cats
                .last_mut()
                .ok_or_else(|| err("question before any category header".into()))?;
            current.questions.push(Question {
                text: q.trim().to_string(),
                points,
            });
        } else {
            return Err(err(format!("unrecognized line {line:?}")));
        }
    }
    let tool = tool.ok_or_else(|| Error::Parse {
        line: 0,
        message: "missing 'tool:' line".into(),
    })?;
    cats.sort_by_key(|c| c.category);
    Ok(Questionnaire {
        tool,
        categories: cats,
    })
}

pub fn load_questionnaire(path: impl AsRef<Path>) -> Result<Questionnaire> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_questionnaire(&text)
}

pub fn score_category(points: &[u8]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("cannot score a category with no questions"));
    }
    if let Some(p) = points.iter().find(|&&p| p > MAX_POINTS) {
        return Err(Error::invalid(format!("answer {p} is outside 0..=2")));
    }
    let sum: u32 = points.iter().map(|&p| p as u32).sum();
    Ok(100.0 * sum as f64 / (MAX_POINTS as f64 * points.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    pub tool: String,
    pub scores: Vec<(Category, f64)>,
    pub overall: f64,
}

impl Scorecard {
    pub fn score(&self, c: Category) -> f64 {
        self.scores.iter().find(|s| s.0 == c).map(|s| s.1).unwrap_or(f64::NAN)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("tool: {}\n", self.tool);
        for (c, v) in &self.scores {
            s.push_str(&format!("{}: {v:.2}\n", c.name()));
        }
        s.push_str(&format!("overall: {:.2}\n", self.overall));
        s
    }
}

pub fn score_tool(q: &Questionnaire) -> Result<Scorecard> {
    let mut scores = Vec::with_capacity(5);
    for c in Category::ALL {
        let a = q
            .category(c)
            .ok_or_else(|| Error::invalid(format!("questionnaire lacks category {:?}", c.name())))?;
        let pts: Vec<u8> = a.questions.iter().map(|x| x.points).collect();
        let s = score_category(&pts).map_err(|e| Error::invalid(format!("{}: {e}", c.name())))?;
        scores.push((c, s));
    }
    let overall = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
    Ok(Scorecard {
        tool: q.tool.clone(),
        scores,
        overall,
    })
}

/// Tools in input order by the five categories plus the overall column.
pub fn compare_scorecards(cards: &[Scorecard]) -> Result<String> {
    if cards.is_empty() {
        return Err(Error::invalid("need at least one scorecard"));
    }
    let mut s = String::from("tool");
    for c in Category::ALL {
        s.push(',');
        s.push_str(c.name());
    }
    s.push_str(",overall\n");
    for card in cards {
        s.push_str(&card.tool.replace(',', ";"));
        for c in Category::ALL {
            s.push_str(&format!(",{}", card.score(c)));
        }
        s.push_str(&format!(",{}\n", card.overall));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_examples() {
        assert_eq!(score_category(&[2, 2, 2, 2]).unwrap(), 100.0);
        assert_eq!(score_category(&[2, 2, 2, 0]).unwrap(), 75.0);
        assert_eq!(score_category(&[0, 0]).unwrap(), 0.0);
        assert!(score_category(&[]).is_err());
    }

    #[test]
    fn bundled_table_parses() {
        let q = parse_questionnaire(FULL_MARKS_QUESTIONNAIRE).unwrap();
        let sizes: Vec<usize> = q.categories.iter().map(|c| c.questions.len()).collect();
        assert_eq!(sizes, vec![4, 5, 4, 6, 1]);
        let card = score_tool(&q).unwrap();
        assert!(card.scores.iter().all(|s| s.1 == 100.0));
        assert_eq!(card.overall, 100.0);
    }

    #[test]
    fn bad_answers_and_categories() {
        assert!(parse_questionnaire("tool: x\n[Interpretability]\n3 | q\n").is_err());
        assert!(parse_questionnaire("tool: x\n[Usability]\n").is_err());
        assert!(parse_questionnaire("[Interpretability]\n2 | q\n").is_err());
    }

    #[test]
    fn empty_category_parses_but_does_not_score() {
        let mut text = String::from("tool: t\n");
        for c in Category::ALL {
            text.push_str(&format!("[{}]\n", c.name()));
        }
        let q = parse_questionnaire(&text).unwrap();
        assert_eq!(q.n_questions(), 0);
        assert!(score_tool(&q).is_err());
    }

    #[test]
    fn categories_reordered_canonically() {
        let text = "tool: t\n[Internal Analysis]\n1 | a\n[Functional Description]\n2 | b\n";
        let q = parse_questionnaire(text).unwrap();
        assert_eq!(q.categories[0].category, Category::FunctionalDescription);
        assert!(score_tool(&q).is_err());
    }
}
