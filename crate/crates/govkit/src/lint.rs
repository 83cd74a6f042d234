//! Static diagnostics for policy sources, as reported by `govkit policy lint`.

use govkit_core::dsl::{parse_policy_source, ParseError};
use govkit_core::engine::{capability_violations, Capability};
use govkit_core::ErrorCode;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Note,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<u32>,
}

impl Diagnostic {
    pub fn render(&self, file: &str) -> String {
        let at = match (self.line, self.column) {
            (Some(l), Some(c)) => format!("{file}:{l}:{c}"),
            _ => file.to_string(),
        };
        let sev = match self.severity {
            Severity::Note => "note",
            Severity::Error => "error",
        };
        format!("{at}: {sev} {}: {}", self.code, self.message)
    }
}

/// Parse, name-resolution and capability diagnostics. The source is clean
/// iff no diagnostic has `Severity::Error`.
pub fn lint_source(source: &str) -> Vec<Diagnostic> {
    let prog = match parse_policy_source(source) {
        Ok(p) => p,
        Err(e) => {
            let message = match &e {
                ParseError::Syntax(s) => s.message.clone(),
                ParseError::MissingFunction(names) => format!("missing lifecycle function(s): {}", names.join(", ")),
                ParseError::UnknownIdentifier { name, .. } => format!("unknown identifier `{name}`"),
            };
            let pos = e.pos();
            return vec![Diagnostic {
                severity: Severity::Error,
                code: e.code().as_str().into(),
                message,
                line: pos.map(|p| p.line),
                column: pos.map(|p| p.col),
            }];
        }
    };
    let mut out: Vec<Diagnostic> = capability_violations(&prog)
        .into_iter()
        .map(|(func, callee, pos, cap)| Diagnostic {
            severity: Severity::Error,
            code: ErrorCode::CapabilityDenied.as_str().into(),
            message: format!("`{}` needs {} which `{func}` does not have", callee.trim_start_matches('.'), cap.name()),
            line: Some(pos.line),
            column: Some(pos.col),
        })
        .collect();
    for f in govkit_core::dsl::LIFECYCLE {
        for (callee, pos) in prog.calls_in(f) {
            if govkit_core::engine::capability_of_call(&callee) == Some(Capability::HttpFetch) {
                out.push(Diagnostic {
                    severity: Severity::Note,
                    code: "HTTP_ALLOWLIST".into(),
                    message: "http_fetch only works for URLs on the community allow-list".into(),
                    line: Some(pos.line),
                    column: Some(pos.col),
                });
            }
        }
    }
    if prog.is_trial() {
        out.push(Diagnostic {
            severity: Severity::Note,
            code: "TRIAL_MODE".into(),
            message: "pass and fail are both empty: outcomes are recorded as trial dispositions".into(),
            line: None,
            column: None,
        });
    }
    out.sort_by_key(|d| (d.line, d.column));
    out
}

pub fn is_clean(diags: &[Diagnostic]) -> bool {
    diags.iter().all(|d| d.severity != Severity::Error)
}
