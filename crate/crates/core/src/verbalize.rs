//! Text renderings of a tree: if-then rule lines and a wiki-style profile.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codex::{CodifiedDecisionTree, StatementStatus};
use crate::oracle::{OracleError, TextGenerator};
use crate::templates::Templates;

pub const OTHER_CHAPTER: &str = "Other behaviors";

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn rule_line(question_path: &[String], statement: &str) -> String {
    let statement = one_line(statement);
    if question_path.is_empty() {
        format!("ALWAYS: {statement}")
    } else {
        let conditions: Vec<String> = question_path.iter().map(|q| one_line(q)).collect();
        format!("IF {} THEN {statement}", conditions.join(" AND "))
    }
}

fn rules(tree: &CodifiedDecisionTree, include_abolished: bool) -> Vec<String> {
    tree.preorder()
        .into_iter()
        .map(|id| &tree.nodes[&id])
        .flat_map(|node| {
            node.statements
                .iter()
                .filter(move |s| include_abolished || s.status == StatementStatus::Accepted)
                .map(move |s| rule_line(&node.question_path, &s.text))
        })
        .collect()
}

/// One rule per line in pre-order. Statements at the root become `ALWAYS:`
/// rules; everything else is conditioned on its node's full question path.
pub fn verbalize(tree: &CodifiedDecisionTree) -> String {
    rules(tree, true).into_iter().map(|r| r + "\n").collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineChapter {
    pub title: String,
    #[serde(default)]
    pub rules: Vec<usize>,
    #[serde(default)]
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WikiChapter {
    pub title: String,
    pub rules: Vec<String>,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WikiDocument {
    pub title: String,
    pub chapters: Vec<WikiChapter>,
}

impl WikiDocument {
    pub fn render(&self) -> String {
        let mut out = format!("# {}\n", self.title);
        for chapter in &self.chapters {
            let _ = write!(out, "\n## {}\n\n{}\n", chapter.title, chapter.body.trim_end());
        }
        out
    }
}

pub fn parse_outline(raw: &str) -> Result<Vec<OutlineChapter>, OracleError> {
    let fail = |message: &str| OracleError::Extraction {
        message: message.to_string(),
        raw: raw.to_string(),
    };
    let (start, end) = match (raw.find('['), raw.rfind(']')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err(fail("outline is not a JSON array")),
    };
    let chapters: Vec<OutlineChapter> =
        serde_json::from_str(&raw[start..=end]).map_err(|e| fail(&format!("outline: {e}")))?;
    let chapters: Vec<_> = chapters.into_iter().filter(|c| !c.title.trim().is_empty()).collect();
    if chapters.is_empty() {
        return Err(fail("outline has no chapters"));
    }
    Ok(chapters)
}

/// Chapter index for each rule (0-based): the first chapter listing its
/// number, else the first whose keyword occurs in it, else `None`.
fn route_rules(rules: &[String], outline: &[OutlineChapter]) -> Vec<Option<usize>> {
    rules
        .iter()
        .enumerate()
        .map(|(i, rule)| {
            outline.iter().position(|c| c.rules.contains(&(i + 1))).or_else(|| {
                let lower = rule.to_lowercase();
                outline.iter().position(|c| {
                    c.keywords
                        .iter()
                        .any(|k| !k.trim().is_empty() && lower.contains(&k.trim().to_lowercase()))
                })
            })
        })
        .collect()
}

fn numbered(rules: &[String]) -> String {
    rules
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{}. {r}\n", i + 1))
        .collect()
}

/// Two-stage wiki profile: an outline over the accepted rules, then one fill
/// per chapter. Rules the outline leaves out go to a trailing chapter.
pub fn wikify(
    tree: &CodifiedDecisionTree,
    llm: &dyn TextGenerator,
    templates: &Templates,
) -> Result<WikiDocument, OracleError> {
    let character = tree.character.as_str();
    let title = format!("{character} profile");
    let accepted = rules(tree, false);
    if accepted.is_empty() {
        return Ok(WikiDocument {
            title,
            chapters: vec![WikiChapter {
                title: "Behaviors".into(),
                rules: Vec::new(),
                body: format!("No validated behaviors are recorded for {character}."),
            }],
        });
    }
    let outline_raw = llm.generate(&templates.render(
        "wiki_outline",
        &[("character", character), ("rules", &numbered(&accepted))],
    ))?;
    let mut outline = parse_outline(&outline_raw)?;
    let routes = route_rules(&accepted, &outline);
    let mut assigned: Vec<Vec<String>> = vec![Vec::new(); outline.len()];
    let mut other = Vec::new();
    for (rule, route) in accepted.into_iter().zip(routes) {
        match route {
            Some(c) => assigned[c].push(rule),
            None => other.push(rule),
        }
    }
    if !other.is_empty() {
        outline.push(OutlineChapter {
            title: OTHER_CHAPTER.into(),
            rules: Vec::new(),
            keywords: Vec::new(),
        });
        assigned.push(other);
    }
    let outline_text: String = outline.iter().map(|c| format!("- {}\n", c.title)).collect();
    let chapters = outline
        .par_iter()
        .zip(assigned)
        .map(|(chapter, rules)| {
            let prompt = templates.render(
                "wiki_chapter",
                &[
                    ("character", character),
                    ("outline", &outline_text),
                    ("title", &chapter.title),
                    ("rules", &numbered(&rules)),
                ],
            );
            llm.generate(&prompt).map(|body| WikiChapter {
                title: chapter.title.clone(),
                rules,
                body: body.trim().to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WikiDocument { title, chapters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codex::{InductionConfig, Statement, StatementKind, ValidationStats};
    use crate::oracle::testkit::{FnGenerator, ScriptedGenerator};

    fn st(text: &str) -> Statement {
        Statement::accepted(text, StatementKind::Conditional, ValidationStats::new(1, 0, 0))
    }

    fn tree() -> CodifiedDecisionTree {
        let mut t = CodifiedDecisionTree::empty("Mira", InductionConfig::default());
        let root = t.root;
        let n = t.nodes.get_mut(&root).unwrap();
        n.statements.push(Statement::accepted("Mira hums.", StatementKind::Global, ValidationStats::new(3, 0, 0)));
        n.statements.push(Statement::accepted("Mira is polite.", StatementKind::Global, ValidationStats::new(3, 0, 0)));
        let a = t.push_child(root, "Is it raining?", vec![], false);
        t.push_child(a, "Is Tomo nearby?", vec![st("Mira shares her umbrella.")], true);
        t
    }

    #[test]
    fn rule_lines() {
        let text = verbalize(&tree());
        assert_eq!(
            text,
            "ALWAYS: Mira hums.\nALWAYS: Mira is polite.\nIF Is it raining? AND Is Tomo nearby? THEN Mira shares her umbrella.\n"
        );
        assert_eq!(text, verbalize(&tree()));
    }

    #[test]
    fn empty_tree_needs_no_model() {
        let t = CodifiedDecisionTree::empty("Mira", InductionConfig::default());
        let llm = ScriptedGenerator::new(vec![]);
        let doc = wikify(&t, &llm, &Templates::default()).unwrap();
        assert_eq!(doc.chapters.len(), 1);
        assert!(doc.chapters[0].body.contains("No validated behaviors"));
        assert_eq!(llm.calls(), 0);
    }

    #[test]
    fn scripted_outline_and_fills() {
        let llm = ScriptedGenerator::new(vec![
            r#"[{"title": "Habits", "rules": [1], "keywords": []}, {"title": "Kindness", "rules": [], "keywords": ["umbrella"]}]"#.into(),
            "She hums.".into(),
            "She shares.".into(),
        ]);
        let doc = wikify(&tree(), &llm, &Templates::default()).unwrap();
        let titles: Vec<_> = doc.chapters.iter().map(|c| c.title.as_str()).collect();
        assert_eq!(titles, vec!["Habits", "Kindness", OTHER_CHAPTER]);
        assert_eq!(doc.chapters[1].rules.len(), 1);
        assert_eq!(doc.chapters[2].rules, vec!["ALWAYS: Mira is polite."]);
        assert!(doc.render().starts_with("# Mira profile\n"));
    }

    #[test]
    fn every_statement_reaches_exactly_one_chapter() {
        let llm = FnGenerator::new(|p: &str| {
            Ok(if p.contains("Propose the chapters") {
                r#"[{"title": "A", "rules": [1, 3]}, {"title": "B", "rules": [3]}]"#.to_string()
            } else {
                p.to_string()
            })
        });
        let doc = wikify(&tree(), &llm, &Templates::default()).unwrap();
        for text in ["Mira hums.", "Mira is polite.", "Mira shares her umbrella."] {
            let hits = doc.chapters.iter().filter(|c| c.body.contains(text)).count();
            assert_eq!(hits, 1, "{text}");
        }
    }

    #[test]
    fn abolished_never_wikified() {
        let mut t = tree();
        let root = t.root;
        t.nodes.get_mut(&root).unwrap().statements.push(Statement {
            status: StatementStatus::Abolished,
            ..st("Mira shouts.")
        });
        assert!(verbalize(&t).contains("Mira shouts."));
        let llm = FnGenerator::new(|p: &str| {
            Ok(if p.contains("Propose the chapters") {
                r#"[{"title": "All", "rules": [1, 2, 3, 4]}]"#.to_string()
            } else {
                p.to_string()
            })
        });
        let doc = wikify(&t, &llm, &Templates::default()).unwrap();
        assert!(!doc.render().contains("Mira shouts."));
    }

    #[test]
    fn bad_outline_is_an_extraction_error() {
        let llm = ScriptedGenerator::new(vec!["no chapters today".into()]);
        assert!(matches!(
            wikify(&tree(), &llm, &Templates::default()),
            Err(OracleError::Extraction { .. })
        ));
    }
}
