use std::collections::BTreeMap;

use crate::gateway::{ActionRequest, ToolError, ToolExecutor};

/// Canned tool outputs. `Web_Crawl` serves pages keyed by the `url`
/// argument; every executed request is recorded.
#[derive(Clone, Debug, Default)]
pub struct MockExecutor {
    pages: BTreeMap<String, String>,
    executed: Vec<ActionRequest>,
}

impl MockExecutor {
    pub fn new(pages: BTreeMap<String, String>) -> Self {
        Self {
            pages,
            executed: Vec::new(),
        }
    }

    pub fn executed(&self) -> &[ActionRequest] {
        &self.executed
    }

    pub fn take_executed(&mut self) -> Vec<ActionRequest> {
        std::mem::take(&mut self.executed)
    }
}

impl ToolExecutor for MockExecutor {
    fn execute(&mut self, request: &ActionRequest) -> Result<String, ToolError> {
        self.executed.push(request.clone());
        let arg = |k: &str| request.args.get(k).map(String::as_str).unwrap_or("");
        match request.api.as_str() {
            "Web_Crawl" => self
                .pages
                .get(arg("url"))
                .cloned()
                .ok_or_else(|| ToolError(format!("no page at {:?}", arg("url")))),
            "Send_Email" => Ok(format!("email sent to {}", arg("to"))),
            "Delete_Email" => Ok("emails deleted".into()),
            "Find_Photo" => Ok("found 3 photos".into()),
            "Move_Data" => Ok(format!("data moved to {}", arg("to"))),
            other => Ok(format!("{other} done")),
        }
    }
}
