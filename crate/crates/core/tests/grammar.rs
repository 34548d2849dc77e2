mod support;

use proptest::prelude::*;
use tooltraj_core::corpus::{parse_annotation, render_annotation, SegmentAnnotation, DOMAINS, PLATFORMS, TASKS};
use tooltraj_core::toolschema::{parse_toolset, serialize_toolset};
use tooltraj_core::trajectory::{parse_trajectory, parse_with_toolset, serialize_trajectory};
use tooltraj_core::workflow::{parse_workflows, serialize_workflow, ExecutionGraph, Workflow};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn trajectory_round_trip(t in support::valid_trajectory()) {
        let text = serialize_trajectory(&t, false, None).unwrap();
        let parsed = parse_trajectory(&text).unwrap();
        prop_assert!(parsed.warnings.is_empty());
        prop_assert_eq!(&parsed.trajectory, &t);
        prop_assert_eq!(serialize_trajectory(&parsed.trajectory, false, None).unwrap(), text);
    }

    #[test]
    fn toolsets_block_round_trip(t in support::valid_trajectory(), tools in support::toolset()) {
        let text = serialize_trajectory(&t, true, Some(&tools)).unwrap();
        let (back, parsed) = parse_with_toolset(&text).unwrap();
        prop_assert_eq!(back, tools);
        prop_assert_eq!(parsed.trajectory, t);
    }

    #[test]
    fn toolset_round_trip(tools in support::toolset()) {
        prop_assert_eq!(parse_toolset(&serialize_toolset(&tools)).unwrap(), tools);
    }

    #[test]
    fn annotation_round_trip(
        summary in "[A-Za-z ]{1,30}",
        d in prop::sample::subsequence(DOMAINS.to_vec(), 1..4),
        p in prop::sample::select(PLATFORMS.to_vec()),
        task in prop::sample::select(TASKS.to_vec()),
    ) {
        let a = SegmentAnnotation {
            multi_step: true,
            summary: Some(summary.trim().to_string()).filter(|s| !s.is_empty()),
            domains: d.into_iter().map(String::from).collect(),
            platform: Some(p.into()),
            task_category: Some(task.into()),
        };
        let parsed = parse_annotation(&render_annotation(&a)).unwrap();
        prop_assert!(parsed.warnings.is_empty());
        prop_assert_eq!(parsed.annotation, a);
    }

    #[test]
    fn workflow_round_trip(tools in support::toolset(), desc in "[A-Za-z ]{1,20}", parallel in any::<bool>()) {
        let names: Vec<String> = tools.iter().map(|t| t.name.clone()).collect();
        let stages = if parallel { vec![names.clone()] } else { names.iter().map(|n| vec![n.clone()]).collect() };
        let w = Workflow {
            description: desc.trim().to_string(),
            steps: names.iter().enumerate().map(|(i, n)| format!("Step{}: run {n}", i + 1)).collect(),
            graph: ExecutionGraph { stages },
            actions: vec![],
            tools,
        };
        prop_assume!(!w.description.is_empty());
        let batch = parse_workflows(&serialize_workflow(&w));
        prop_assert!(batch.diagnostics.is_empty(), "{:?}", batch.diagnostics);
        prop_assert_eq!(&batch.workflows[0], &w);
    }
}
