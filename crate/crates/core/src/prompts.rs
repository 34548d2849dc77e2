//! Default prompt templates, one per stage, and their rendering.
//!
//! Templates use `{name}` placeholders filled in a single pass, so values
//! that themselves contain braces are inserted verbatim. Every template
//! keeps its inputs under fixed section headings (see the `*_HEADING`
//! constants), which is how the mock backend finds them again.

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::stage::Stage;

pub const SOURCE_HEADING: &str = "### Source Document";
pub const TOOLS_HEADING: &str = "### Available Tool Candidates";
pub const WORKFLOW_HEADING: &str = "### Workflow";
pub const TRAJECTORY_HEADING: &str = "### Trajectory";
pub const OUTPUT_HEADING: &str = "## Output Format";

pub const ANNOTATE: &str = "\
Decide whether the text below describes a multi-step procedure carried out with an app, website, computer or other machine (robot, elevator, appliance, ...). If it does, summarize the task in one sentence and label its platform, domain(s) and task category.

Platform labels: operator, computer, phone, machine, other
Domain labels: adult, arts_and_entertainment, autos_and_vehicles, beauty_and_fitness, books_and_literature, business_and_industrial, computers_and_electronics, finance, food_and_drink, games, health, hobbies_and_leisure, home_and_garden, internet_and_telecom, jobs_and_education, law_and_government, news, online_communities, people_and_society, pets_and_animals, real_estate, science, sensitive_subjects, shopping, sports, travel_and_transportation
Task labels: databases, multimedia_processing, cloud_platforms, calendar_management, cryptocurrency, location_services, communication, search, file_systems, web_scraping, ecommerce_and_retail, customer_data_platforms, developer_tools, virtualization, version_control, research_and_data, aigc, travel_and_transportation, note_taking, language_translation, rag_systems, security_and_iam, social_media, monitoring, weather_services, customer_support, blockchain, knowledge_and_memory, financial_trading, marketing, enterprise_business_intelligence, transportation_logistics, iphone_android, smart_home, education_elearning, robot_control, website_control, gaming_entertainment

### Source Document
{text}

## Output Format
Either
<multi_step>False</multi_step>
or
<multi_step>True</multi_step>
<summary>one sentence</summary>
<domain>comma-separated domain labels</domain>
<platform>platform label</platform>
<task>task label</task>
";

pub const EXTRACT: &str = "\
Turn the procedure described below into callable functions. List every workflow the text contains and every step of each workflow. Map each step to a function, order the functions as an execution graph where parallel steps share a stage, give example calls with realistic arguments, and define every function as a JSON-schema tool. Keep tools single-purpose with descriptive parameter names and explicit types (string, number, integer, boolean, array, object). Model dependencies, uniqueness limits and conditional rules found in the text.

### Source Document
{text}

## Output Format
One block per workflow:
<workflow>
<description>short task description</description>
<steps>Step1: ...\\nStep2: ...</steps>
<execution_graph>(tool_a)->(tool_b, tool_c)->(tool_d)</execution_graph>
<actions>[{\"name\": \"tool_a\", \"arguments\": {\"arg\": \"value\"}}]</actions>
<tools>[{\"name\": \"tool_a\", \"description\": \"...\", \"inputSchema\": {\"type\": \"object\", \"properties\": {\"arg\": {\"type\": \"string\", \"description\": \"...\"}}, \"required\": [\"arg\"]}}]</tools>
</workflow>
";

pub const GENERATE: &str = "\
Write one complete multi-turn conversation in which an assistant helps a user carry out the workflow below with the listed tools. Open with a system prompt stating every rule and constraint from the source document. User requests should be natural, sometimes ambiguous, and at least once demanding. The assistant checks preconditions, follows the rules, asks for missing values instead of inventing them, and confirms irreversible actions. Tool outputs are realistic JSON; failures return only an error message. Include several interaction patterns such as rule conflicts, error recovery, clarification and multi-hop reasoning.

Turn order: a user or tool message is followed by an assistant message; an assistant message with a call is followed by the tool result; an assistant message without a call is followed by a user message. A tool result is never followed by a user message. Each assistant message makes at most one call, written as
<func>
{\"name\": \"exact_tool_name\", \"arguments\": {\"arg\": \"value\"}}
</func>
Only call listed tools, with exactly their declared arguments.

### Available Tool Candidates
{tools}

### Workflow
{workflow}

### Source Document
{text}

## Output Format
Close every tag you open.
<system>
...
</system>
<user>
...
</user>
<assistant>
...
<func>
{\"name\": \"...\", \"arguments\": {...}}
</func>
</assistant>
<tool>
...
</tool>
<assistant>
...
</assistant>
";

pub const REFINE: &str = "\
Rewrite the conversation below into a harder, more realistic training example. Make the system prompt a structured rule set that also describes the data schema tool outputs follow. Give the user a consistent persona and requests with several explicit and implicit constraints, including at least one pitfall the assistant must notice. Use a wider mix of read and write tools (add tools where needed), structured arguments, realistic non-placeholder tool outputs and non-trivial error cases. Remove repetitive tool use. Keep the turn order rules: one call per assistant message, every call answered by a tool message, every tool message followed by an assistant message, never a user message directly after a tool message. Fix any rule or tool misuse in the original.

### Available Tool Candidates
{tools}

### Trajectory
{trajectory}

## Output Format
First every candidate tool (original plus added) as an OpenAI-format JSON list, then the conversation:
<toolsets>
[{\"name\": \"...\", \"description\": \"...\", \"inputSchema\": {\"type\": \"object\", \"properties\": {}, \"required\": []}}]
</toolsets>
<system>
...
</system>
<user>
...
</user>
<assistant>
...
<func>
{\"name\": \"...\", \"arguments\": {...}}
</func>
</assistant>
<tool>
...
</tool>
<assistant>
...
</assistant>
";

pub const JUDGE: &str = "\
Score the tool-use conversation below on three binary rubrics; output 1 when no turn shows the problem and 0 otherwise. Be strict.
R1 (tool-call hallucination): a call uses an argument value that is neither given nor derivable from the preceding dialogue.
R2 (capability hallucination): the assistant refuses something the tools can do, or proceeds with something they cannot do without stating the limitation and offering the closest alternative.
R3 (context hallucination): the assistant misstates earlier constraints or decisions, changes IDs, counts, dates or constraints without new evidence, or contradicts established facts.

### Trajectory
{trajectory}

## Output Format
Only a JSON object with integer values:
{\"R1\": 0 or 1, \"R2\": 0 or 1, \"R3\": 0 or 1}
";

/// One template per stage; any of them may be replaced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub annotate: String,
    pub extract: String,
    pub generate: String,
    pub refine: String,
    pub judge: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            annotate: ANNOTATE.into(),
            extract: EXTRACT.into(),
            generate: GENERATE.into(),
            refine: REFINE.into(),
            judge: JUDGE.into(),
        }
    }
}

impl PromptSet {
    pub fn template(&self, stage: Stage) -> &str {
        match stage {
            Stage::Annotate => &self.annotate,
            Stage::Extract => &self.extract,
            Stage::Generate => &self.generate,
            Stage::Refine => &self.refine,
            Stage::Judge => &self.judge,
        }
    }

    pub fn template_mut(&mut self, stage: Stage) -> &mut String {
        match stage {
            Stage::Annotate => &mut self.annotate,
            Stage::Extract => &mut self.extract,
            Stage::Generate => &mut self.generate,
            Stage::Refine => &mut self.refine,
            Stage::Judge => &mut self.judge,
        }
    }
}

/// Single-pass `{key}` substitution. Unknown placeholders are left as is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Text between the line `heading` and the next line starting with `#`
/// that equals one of the known headings, trimmed.
pub fn section<'a>(prompt: &'a str, heading: &str) -> Option<&'a str> {
    const HEADINGS: [&str; 5] = [
        SOURCE_HEADING,
        TOOLS_HEADING,
        WORKFLOW_HEADING,
        TRAJECTORY_HEADING,
        OUTPUT_HEADING,
    ];
    let mut line_start = 0;
    let mut body_start = None;
    for line in prompt.split_inclusive('\n') {
        let trimmed = line.trim_end();
        if let Some(start) = body_start {
            if HEADINGS.contains(&trimmed) {
                return Some(prompt[start..line_start].trim());
            }
        } else if trimmed == heading {
            body_start = Some(line_start + line.len());
        }
        line_start += line.len();
    }
    body_start.map(|start| prompt[start..].trim())
}
