use std::time::Duration;

use super::{validate_output, PlacementAlgorithm, PlacementError, PlacementInput, PlacementOutput};

/// Placement delegated to an HTTP service. The request is a GET whose JSON
/// body carries `prs`, `appInfo` and `clusterData`; the response body is a
/// placement output document.
#[derive(Debug)]
pub struct ExternalAlgorithm {
    url: String,
    client: reqwest::blocking::Client,
}

impl ExternalAlgorithm {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, PlacementError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| PlacementError::Unreachable(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            client,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl PlacementAlgorithm for ExternalAlgorithm {
    fn name(&self) -> &str {
        "external"
    }

    fn generate_placement(&mut self, input: &PlacementInput) -> Result<PlacementOutput, PlacementError> {
        let body = serde_json::to_vec(input).expect("placement input serializes");
        let resp = self
            .client
            .get(&self.url)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .map_err(|e| PlacementError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(PlacementError::Unreachable(format!("status {status}")));
        }
        let text = resp
            .text()
            .map_err(|e| PlacementError::Unreachable(e.to_string()))?;
        if !status.is_success() {
            return Err(PlacementError::MalformedResponse(format!("status {status}: {text}")));
        }
        let out: PlacementOutput =
            serde_json::from_str(&text).map_err(|e| PlacementError::MalformedResponse(e.to_string()))?;
        validate_output(input, &out)?;
        Ok(out)
    }
}
