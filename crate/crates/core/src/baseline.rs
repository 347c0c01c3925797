//! Single-prompt baselines: the task sent as is, and with a step-by-step
//! instruction wrapped around it.

use crate::error::{Error, Result};
use crate::llm::ChatMessage;
use crate::prompt::{self, TemplateId};
use crate::session::{Session, Temperature};

fn check(input: &str) -> Result<&str> {
    let input = input.trim();
    if input.is_empty() {
        Err(Error::Validation("task description is empty".into()))
    } else {
        Ok(input)
    }
}

pub fn run_standard(input: &str, session: &mut Session) -> Result<String> {
    let input = check(input)?;
    let request = session.request(
        "baseline.standard",
        vec![ChatMessage::user(input)],
        Temperature::Creative,
    );
    Ok(session.complete(&request)?.content)
}

pub fn run_cot(input: &str, session: &mut Session) -> Result<String> {
    let input = check(input)?;
    let text = prompt::render(TemplateId::Cot, &[("input", input)])?;
    let request = session.request(
        "baseline.cot",
        vec![ChatMessage::user(text)],
        Temperature::Creative,
    );
    Ok(session.complete(&request)?.content)
}
