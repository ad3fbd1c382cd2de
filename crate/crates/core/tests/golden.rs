use si_core::prompt::{MessageRole, GOLDEN_TEMPLATE};
use si_core::{PromptTemplate, RenderMode};

const GOLDEN_RAW_Q_C: &[u8] = include_bytes!("golden/si_v1_raw_Q_C.txt");

#[test]
fn raw_render_matches_golden_file() {
    let t = PromptTemplate::golden(RenderMode::RawInst);
    let b = t.render("Q", "C").unwrap();
    assert_eq!(b.rendered_raw().unwrap().as_bytes(), GOLDEN_RAW_Q_C);
}

#[test]
fn golden_template_markers() {
    assert!(GOLDEN_TEMPLATE.starts_with("[INST]<<SYS>> "));
    assert!(GOLDEN_TEMPLATE.ends_with("<</SYS>> \nQuestion: {question} \nContext: {context} \nAnswer:"));
    assert_eq!(GOLDEN_TEMPLATE.matches("{question}").count(), 1);
    assert_eq!(GOLDEN_TEMPLATE.matches("{context}").count(), 1);
}

#[test]
fn template_file_on_disk_is_the_compiled_one() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("prompts/si_v1.txt");
    let t = PromptTemplate::from_file(&path, RenderMode::RawInst).unwrap();
    assert_eq!(t.id(), "si_v1");
    assert_eq!(t.render("Q", "C").unwrap().rendered_raw().unwrap().as_bytes(), GOLDEN_RAW_Q_C);
}

#[test]
fn chat_mode_splits_system_and_user() {
    let t = PromptTemplate::golden(RenderMode::ChatMessages);
    let b = t.render("How are you doing?", "").unwrap();
    let m = b.rendered_messages().unwrap();
    assert_eq!(m[0].role, MessageRole::System);
    assert!(GOLDEN_TEMPLATE.contains(&m[0].content));
    assert_eq!(m[1].role, MessageRole::User);
    assert_eq!(m[1].content, "Question: How are you doing?\nContext: \nAnswer:");
}
