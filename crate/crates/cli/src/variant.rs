use std::fmt;
use std::str::FromStr;

use fdg_core::fedruntime::PromptPlan;

use crate::error::CliError;

/// Component toggles of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub use_global_prompt: bool,
    pub use_domain_prompt: bool,
    pub use_contrastive: bool,
    pub use_dpg: bool,
    pub use_mst: bool,
    pub include_target_text: bool,
}

impl Toggles {
    pub fn validate(&self) -> Result<(), CliError> {
        let conflict = |a: &str, b: &str| Err(CliError::Config(format!("illegal variant: {a} requires {b}")));
        if self.use_dpg && !self.use_domain_prompt {
            return conflict("use_dpg", "use_domain_prompt");
        }
        if self.use_domain_prompt && !self.use_dpg {
            return conflict("use_domain_prompt", "use_dpg");
        }
        if self.use_contrastive && !self.use_global_prompt {
            return conflict("use_contrastive", "use_global_prompt");
        }
        if self.use_contrastive && !self.use_domain_prompt {
            return conflict("use_contrastive", "use_domain_prompt");
        }
        if self.include_target_text && !self.use_mst {
            return conflict("include_target_text", "use_mst");
        }
        if !self.use_global_prompt && !self.use_domain_prompt {
            return Err(CliError::Config(
                "illegal variant: neither use_global_prompt nor use_domain_prompt is set".into(),
            ));
        }
        Ok(())
    }

    pub fn plan(&self) -> PromptPlan {
        PromptPlan {
            use_global_prompt: self.use_global_prompt,
            use_domain_prompt: self.use_domain_prompt,
            use_contrastive: self.use_contrastive,
            use_dpg: self.use_dpg,
        }
    }
}

/// Rows of the component ablation, `V1`..`V6` plus the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Global prompt only.
    V1,
    /// Domain prompts with prompt generation, no global prompt.
    V2,
    /// Global prompt trained on style-transferred data.
    V3,
    /// Everything except style transfer.
    V4,
    /// Everything except the contrastive term.
    V5,
    /// Full method plus the held-out domain's description.
    V6,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::V5,
        Variant::V6,
        Variant::Full,
    ];

    pub fn toggles(self) -> Toggles {
        let t = |g, d, c, p, m, x| Toggles {
            use_global_prompt: g,
            use_domain_prompt: d,
            use_contrastive: c,
            use_dpg: p,
            use_mst: m,
            include_target_text: x,
        };
        match self {
            Variant::V1 => t(true, false, false, false, false, false),
            Variant::V2 => t(false, true, false, true, false, false),
            Variant::V3 => t(true, false, false, false, true, false),
            Variant::V4 => t(true, true, true, true, false, false),
            Variant::V5 => t(true, true, false, true, true, false),
            Variant::V6 => t(true, true, true, true, true, true),
            Variant::Full => t(true, true, true, true, true, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
            Variant::V5 => "v5",
            Variant::V6 => "v6",
            Variant::Full => "full",
        }
    }

    pub fn code(self) -> u8 {
        Variant::ALL.iter().position(|&v| v == self).expect("listed") as u8
    }

    pub fn from_code(code: u8) -> Option<Variant> {
        Variant::ALL.get(usize::from(code)).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown variant {s:?} (v1..v6, full)")))
    }
}
