use std::path::Path;

use gafdetect::rules::PatternRuleSet;

#[test]
fn rules_document_is_current() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/pattern_rules.md");
    let on_disk = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        on_disk,
        PatternRuleSet::standard().describe(),
        "docs/pattern_rules.md is stale; regenerate it from PatternRuleSet::describe"
    );
}
