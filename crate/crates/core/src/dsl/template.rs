use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Inputs;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum ParameterDecl {
    Bare(String),
    Full {
        name: String,
        #[serde(default)]
        default: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Parameter {
    pub name: String,
    /// Parameters without a default are mandatory.
    pub default: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    name: String,
    #[serde(default)]
    parameters: Vec<ParameterDecl>,
    body: String,
}

/// Parameterised text with `{{identifier}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Template {
    pub name: String,
    pub parameters: Vec<Parameter>,
    pub body: String,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {template}: missing parameter {name}")]
    MissingParameter { template: String, name: String },
    #[error("template {template}: unknown parameter {name}")]
    UnknownParameter { template: String, name: String },
    #[error("template {template}: value of {name} contains a placeholder marker")]
    InvalidValue { template: String, name: String },
    #[error("template {template}: placeholder {name} is not declared")]
    UndeclaredPlaceholder { template: String, name: String },
    #[error("template {template}: malformed placeholder at byte {offset}")]
    MalformedPlaceholder { template: String, offset: usize },
    #[error("template {template}: parameter {name} declared twice")]
    DuplicateParameter { template: String, name: String },
    #[error("duplicate template name {0}")]
    DuplicateTemplate(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

enum Piece<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Splits a body into literal text and placeholder names. Any `{{` that
/// does not open a well-formed placeholder is reported by byte offset.
fn split_body(body: &str) -> Result<Vec<Piece<'_>>, usize> {
    let mut pieces = Vec::new();
    let mut rest = body;
    let mut offset = 0;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or(offset + open)?;
        let name = &after[..close];
        if !is_ident(name) {
            return Err(offset + open);
        }
        pieces.push(Piece::Text(&rest[..open]));
        pieces.push(Piece::Placeholder(name));
        let consumed = open + 2 + close + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    pieces.push(Piece::Text(rest));
    Ok(pieces)
}

impl Template {
    pub fn new(
        name: impl Into<String>,
        parameters: Vec<Parameter>,
        body: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let t = Template {
            name: name.into(),
            parameters,
            body: body.into(),
        };
        let mut seen = BTreeSet::new();
        for p in &t.parameters {
            if !seen.insert(p.name.as_str()) {
                return Err(TemplateError::DuplicateParameter {
                    template: t.name.clone(),
                    name: p.name.clone(),
                });
            }
        }
        let pieces = split_body(&t.body).map_err(|offset| TemplateError::MalformedPlaceholder {
            template: t.name.clone(),
            offset,
        })?;
        for piece in pieces {
            if let Piece::Placeholder(p) = piece {
                if !seen.contains(p) {
                    return Err(TemplateError::UndeclaredPlaceholder {
                        template: t.name.clone(),
                        name: p.to_string(),
                    });
                }
            }
        }
        Ok(t)
    }

    pub fn from_yaml(text: &str, path: &Path) -> Result<Self, TemplateError> {
        let file: TemplateFile = serde_yaml::from_str(text).map_err(|e| TemplateError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let parameters = file
            .parameters
            .into_iter()
            .map(|p| match p {
                ParameterDecl::Bare(name) => Parameter { name, default: None },
                ParameterDecl::Full { name, default } => Parameter { name, default },
            })
            .collect();
        Template::new(file.name, parameters, file.body)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Substitutes every placeholder in one pass. Substituted values are never
/// re-scanned.
pub fn instantiate_template(t: &Template, inputs: &Inputs) -> Result<String, TemplateError> {
    for (name, value) in inputs {
        if t.parameter(name).is_none() {
            return Err(TemplateError::UnknownParameter {
                template: t.name.clone(),
                name: name.clone(),
            });
        }
        if value.contains("{{") {
            return Err(TemplateError::InvalidValue {
                template: t.name.clone(),
                name: name.clone(),
            });
        }
    }
    let mut values = BTreeMap::new();
    for p in &t.parameters {
        let v = match (inputs.get(&p.name), &p.default) {
            (Some(v), _) | (None, Some(v)) => v,
            (None, None) => {
                return Err(TemplateError::MissingParameter {
                    template: t.name.clone(),
                    name: p.name.clone(),
                })
            }
        };
        values.insert(p.name.as_str(), v.as_str());
    }
    let pieces = split_body(&t.body).map_err(|offset| TemplateError::MalformedPlaceholder {
        template: t.name.clone(),
        offset,
    })?;
    let mut out = String::with_capacity(t.body.len());
    for piece in pieces {
        match piece {
            Piece::Text(s) => out.push_str(s),
            Piece::Placeholder(p) => out.push_str(values[p]),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct TemplateLibrary {
    templates: BTreeMap<String, Template>,
}

impl TemplateLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every `*.yaml`/`*.yml` file in `dir` (not recursive).
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let io = |source| TemplateError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("yaml" | "yml")))
            .collect();
        paths.sort();
        let mut lib = TemplateLibrary::new();
        for path in paths {
            let text = fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.clone(),
                source,
            })?;
            lib.insert(Template::from_yaml(&text, &path)?)?;
            tracing::debug!(path = %path.display(), "loaded template");
        }
        Ok(lib)
    }

    pub fn insert(&mut self, t: Template) -> Result<(), TemplateError> {
        if self.templates.contains_key(&t.name) {
            return Err(TemplateError::DuplicateTemplate(t.name));
        }
        self.templates.insert(t.name.clone(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Template> {
        self.templates.get(name)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpl(params: &[(&str, Option<&str>)], body: &str) -> Result<Template, TemplateError> {
        let params = params
            .iter()
            .map(|(n, d)| Parameter {
                name: n.to_string(),
                default: d.map(str::to_string),
            })
            .collect();
        Template::new("t", params, body)
    }

    fn inputs(pairs: &[(&str, &str)]) -> Inputs {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn substitutes_with_defaults() {
        let t = tmpl(
            &[("source", None), ("duration", Some("1m"))],
            "src={{source}} d={{duration}}",
        )
        .unwrap();
        assert_eq!(
            instantiate_template(&t, &inputs(&[("source", "masters-0")])).unwrap(),
            "src=masters-0 d=1m"
        );
    }

    #[test]
    fn single_pass() {
        let t = tmpl(&[("a", None), ("b", Some("B"))], "{{a}}").unwrap();
        let err = instantiate_template(&t, &inputs(&[("a", "{{b}}")])).unwrap_err();
        assert!(matches!(err, TemplateError::InvalidValue { .. }));
        // Braces that do not form a marker pass through untouched.
        assert_eq!(instantiate_template(&t, &inputs(&[("a", "{b}")])).unwrap(), "{b}");
    }

    #[test]
    fn parameter_errors() {
        let t = tmpl(&[("a", None)], "{{a}}").unwrap();
        assert!(matches!(
            instantiate_template(&t, &Inputs::new()),
            Err(TemplateError::MissingParameter { .. })
        ));
        assert!(matches!(
            instantiate_template(&t, &inputs(&[("a", "1"), ("zz", "2")])),
            Err(TemplateError::UnknownParameter { .. })
        ));
    }

    #[test]
    fn body_checks() {
        assert!(matches!(
            tmpl(&[], "{{x}}"),
            Err(TemplateError::UndeclaredPlaceholder { .. })
        ));
        assert!(matches!(
            tmpl(&[], "{{ x }}"),
            Err(TemplateError::MalformedPlaceholder { offset: 0, .. })
        ));
        assert!(matches!(
            tmpl(&[], "ab{{x"),
            Err(TemplateError::MalformedPlaceholder { offset: 2, .. })
        ));
        assert!(tmpl(&[("a.b_c", None)], "{{a.b_c}} {x}").is_ok());
    }

    #[test]
    fn parses_file_form() {
        let yaml =
            "name: demo\nparameters:\n  - port\n  - { name: host, default: localhost }\nbody: |\n  {{host}}:{{port}}\n";
        let t = Template::from_yaml(yaml, Path::new("demo.yaml")).unwrap();
        assert_eq!(t.parameters[0].default, None);
        assert_eq!(t.parameters[1].default.as_deref(), Some("localhost"));
        assert_eq!(
            instantiate_template(&t, &inputs(&[("port", "80")])).unwrap(),
            "localhost:80\n"
        );
    }
}
