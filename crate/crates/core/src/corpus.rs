//! Corpus segments, the annotation-output grammar and multi-step filtering.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::markup;

pub const PLATFORMS: [&str; 5] = ["operator", "computer", "phone", "machine", "other"];

pub const DOMAINS: [&str; 26] = [
    "adult",
    "arts_and_entertainment",
    "autos_and_vehicles",
    "beauty_and_fitness",
    "books_and_literature",
    "business_and_industrial",
    "computers_and_electronics",
    "finance",
    "food_and_drink",
    "games",
    "health",
    "hobbies_and_leisure",
    "home_and_garden",
    "internet_and_telecom",
    "jobs_and_education",
    "law_and_government",
    "news",
    "online_communities",
    "people_and_society",
    "pets_and_animals",
    "real_estate",
    "science",
    "sensitive_subjects",
    "shopping",
    "sports",
    "travel_and_transportation",
];

pub const TASKS: [&str; 38] = [
    "databases",
    "multimedia_processing",
    "cloud_platforms",
    "calendar_management",
    "cryptocurrency",
    "location_services",
    "communication",
    "search",
    "file_systems",
    "web_scraping",
    "ecommerce_and_retail",
    "customer_data_platforms",
    "developer_tools",
    "virtualization",
    "version_control",
    "research_and_data",
    "aigc",
    "travel_and_transportation",
    "note_taking",
    "language_translation",
    "rag_systems",
    "security_and_iam",
    "social_media",
    "monitoring",
    "weather_services",
    "customer_support",
    "blockchain",
    "knowledge_and_memory",
    "financial_trading",
    "marketing",
    "enterprise_business_intelligence",
    "transportation_logistics",
    "iphone_android",
    "smart_home",
    "education_elearning",
    "robot_control",
    "website_control",
    "gaming_entertainment",
];

/// A raw corpus item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSegment {
    pub id: String,
    pub text: String,
    pub source: String,
    pub byte_len: usize,
}

impl TextSegment {
    /// `None` when the text is blank.
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: impl Into<String>) -> Option<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return None;
        }
        Some(TextSegment {
            id: id.into(),
            byte_len: text.len(),
            text,
            source: source.into(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub multi_step: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_category: Option<String>,
}

impl SegmentAnnotation {
    pub fn not_multi_step() -> Self {
        SegmentAnnotation::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelField {
    Domain,
    Platform,
    Task,
}

/// A label outside the closed vocabulary, kept verbatim.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabWarning {
    pub field: LabelField,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedAnnotation {
    pub annotation: SegmentAnnotation,
    pub warnings: Vec<VocabWarning>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum AnnotationError {
    #[error("no <multi_step> tag in annotation output: {0:?}")]
    MissingMultiStep(String),
    #[error("<multi_step> value {0:?} is neither True nor False")]
    BadMultiStep(String),
}

/// Lowercase, `&` → `and`, non-alphanumeric runs → `_`.
pub fn normalize_label(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase().replace('&', " and ");
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        if !out.is_empty() {
            out.push('_');
        }
        out.push_str(word);
    }
    out
}

fn resolve(raw: &str, vocab: &[&str], field: LabelField, warnings: &mut Vec<VocabWarning>) -> String {
    let norm = normalize_label(raw);
    if vocab.contains(&norm.as_str()) {
        norm
    } else {
        let verbatim = raw.trim().to_string();
        warnings.push(VocabWarning {
            field,
            value: verbatim.clone(),
        });
        verbatim
    }
}

/// Parses annotation-model output. Only the first `<multi_step>` tag
/// counts; the remaining tags are read only when it is `True`.
pub fn parse_annotation(model_output: &str) -> Result<ParsedAnnotation, AnnotationError> {
    let flag = markup::tag_body(model_output, "multi_step")
        .ok_or_else(|| AnnotationError::MissingMultiStep(model_output.to_string()))?;
    let multi_step = if flag.eq_ignore_ascii_case("true") {
        true
    } else if flag.eq_ignore_ascii_case("false") {
        false
    } else {
        return Err(AnnotationError::BadMultiStep(flag.to_string()));
    };
    let mut warnings = Vec::new();
    if !multi_step {
        return Ok(ParsedAnnotation {
            annotation: SegmentAnnotation::not_multi_step(),
            warnings,
        });
    }

    let non_empty = |tag: &str| markup::tag_body(model_output, tag).filter(|s| !s.is_empty());
    let summary = non_empty("summary").map(String::from);
    let domains = non_empty("domain")
        .map(|list| {
            list.split(',')
                .map(str::trim)
                .filter(|d| !d.is_empty())
                .map(|d| resolve(d, &DOMAINS, LabelField::Domain, &mut warnings))
                .collect()
        })
        .unwrap_or_default();
    let platform = non_empty("platform").map(|p| resolve(p, &PLATFORMS, LabelField::Platform, &mut warnings));
    let task_category = non_empty("task").map(|t| resolve(t, &TASKS, LabelField::Task, &mut warnings));

    Ok(ParsedAnnotation {
        annotation: SegmentAnnotation {
            multi_step,
            summary,
            domains,
            platform,
            task_category,
        },
        warnings,
    })
}

/// Writes an annotation in the same tag grammar the annotation model uses.
pub fn render_annotation(a: &SegmentAnnotation) -> String {
    if !a.multi_step {
        return "<multi_step>False</multi_step>".into();
    }
    let mut out = String::from("<multi_step>True</multi_step>");
    let mut tag = |name: &str, body: &str| {
        out.push_str("\n<");
        out.push_str(name);
        out.push('>');
        out.push_str(body);
        out.push_str("</");
        out.push_str(name);
        out.push('>');
    };
    if let Some(s) = &a.summary {
        tag("summary", s);
    }
    if !a.domains.is_empty() {
        tag("domain", &a.domains.join(", "));
    }
    if let Some(p) = &a.platform {
        tag("platform", p);
    }
    if let Some(t) = &a.task_category {
        tag("task", t);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub retained: usize,
    /// `retained / total`; `None` for an empty input.
    pub ratio: Option<f64>,
}

impl FilterStats {
    pub fn from_counts(total: usize, retained: usize) -> Self {
        FilterStats {
            total,
            retained,
            ratio: (total > 0).then(|| retained as f64 / total as f64),
        }
    }
}

/// Keeps the segments labeled multi-step, in input order.
pub fn filter_multistep<I>(annotated: I) -> (Vec<TextSegment>, FilterStats)
where
    I: IntoIterator<Item = (TextSegment, SegmentAnnotation)>,
{
    let mut total = 0;
    let retained: Vec<TextSegment> = annotated
        .into_iter()
        .inspect(|_| total += 1)
        .filter(|(_, a)| a.multi_step)
        .map(|(s, _)| s)
        .collect();
    let stats = FilterStats::from_counts(total, retained.len());
    (retained, stats)
}
