use thiserror::Error;

use super::{ActionBody, ScenarioDoc};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MacroError {
    #[error("unknown cluster in macro {0}")]
    UnknownCluster(String),
    #[error("instance index out of range in macro {text} (cluster has {instances})")]
    IndexOutOfRange { text: String, instances: usize },
    #[error("malformed macro {0}")]
    Malformed(String),
}

/// Name of the `index`-th instance of cluster `cluster`.
pub fn instance_name(cluster: &str, index: usize) -> String {
    format!("{cluster}-{index}")
}

/// Expands `.cluster.<name>.all` or `.cluster.<name>.<k>` to concrete
/// service names. Plain names come back unchanged.
pub fn expand_macro(text: &str, doc: &ScenarioDoc) -> Result<Vec<String>, MacroError> {
    let text = text.trim();
    if !text.starts_with('.') {
        return Ok(vec![text.to_string()]);
    }
    let malformed = || MacroError::Malformed(text.to_string());
    let rest = text.strip_prefix(".cluster.").ok_or_else(malformed)?;
    let (cluster, selector) = rest.rsplit_once('.').ok_or_else(malformed)?;
    if cluster.is_empty() || selector.is_empty() {
        return Err(malformed());
    }
    let instances = doc
        .actions
        .iter()
        .find_map(|a| match &a.body {
            ActionBody::Cluster { instances, .. } if a.name == cluster => Some(*instances),
            _ => None,
        })
        .ok_or_else(|| MacroError::UnknownCluster(text.to_string()))?;
    if selector == "all" {
        return Ok((0..instances).map(|i| instance_name(cluster, i)).collect());
    }
    if !selector.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed());
    }
    match selector.parse::<usize>() {
        Ok(k) if k < instances => Ok(vec![instance_name(cluster, k)]),
        _ => Err(MacroError::IndexOutOfRange {
            text: text.to_string(),
            instances,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_scenario;

    fn doc() -> ScenarioDoc {
        parse_scenario("spec:\n- action: Cluster\n  name: masters\n  cluster: { templateRef: t, instances: 4 }\n")
            .unwrap()
    }

    #[test]
    fn expands() {
        let d = doc();
        assert_eq!(
            expand_macro(".cluster.masters.all", &d).unwrap(),
            ["masters-0", "masters-1", "masters-2", "masters-3"]
        );
        assert_eq!(expand_macro(".cluster.masters.2", &d).unwrap(), ["masters-2"]);
        assert_eq!(expand_macro("masters-0", &d).unwrap(), ["masters-0"]);
    }

    #[test]
    fn errors() {
        let d = doc();
        assert!(matches!(
            expand_macro(".cluster.ghost.all", &d),
            Err(MacroError::UnknownCluster(_))
        ));
        assert!(matches!(
            expand_macro(".cluster.masters.4", &d),
            Err(MacroError::IndexOutOfRange { instances: 4, .. })
        ));
        assert!(matches!(
            expand_macro(".cluster.masters.x", &d),
            Err(MacroError::Malformed(_))
        ));
        assert!(matches!(expand_macro(".service.a", &d), Err(MacroError::Malformed(_))));
    }
}
