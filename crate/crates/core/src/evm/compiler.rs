//! Solidity compiler adapter. The compiler runs as an isolated subprocess per
//! contract; this module owns the exact invocation and output parsing.

use std::env;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use semver::{Version, VersionReq};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable naming the compiler executable.
pub const COMPILER_ENV: &str = "SCVD_SOLC";

#[derive(Debug, thiserror::Error)]
pub enum CompilerError {
    #[error("no Solidity compiler found ({0})")]
    CompilerNotFound(String),
    #[error("compilation failed:\n{stderr}")]
    CompileError { stderr: String },
    #[error("pragma {pragma:?} cannot be satisfied by compiler {compiler}")]
    VersionUnresolvable { pragma: String, compiler: String },
    #[error("unexpected compiler output: {0}")]
    BadOutput(String),
    #[error("compiler i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// How the executable is driven.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompilerInterface {
    /// `solc --combined-json bin,bin-runtime <file>`
    CombinedJson,
    /// `solc --standard-json` / `solcjs --standard-json`, input on stdin.
    StandardJson,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompilerConfig {
    /// Executable; falls back to `$SCVD_SOLC`, then `solc`, then `solcjs` on PATH.
    #[serde(default)]
    pub executable: Option<PathBuf>,
    /// Inferred from the executable name when absent.
    #[serde(default)]
    pub interface: Option<CompilerInterface>,
    /// Version constraint the compiler must satisfy, e.g. `^0.8.0`.
    #[serde(default)]
    pub version_hint: Option<String>,
    #[serde(default)]
    pub optimizer: bool,
}

/// Both bytecode kinds of the selected contract, lowercase hex.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledContract {
    pub name: String,
    pub creation: String,
    pub runtime: String,
}

#[derive(Clone, Debug)]
pub struct SolidityCompiler {
    executable: PathBuf,
    interface: CompilerInterface,
    version: Version,
    optimizer: bool,
}

fn find_on_path(name: &str) -> Option<PathBuf> {
    let path = env::var_os("PATH")?;
    env::split_paths(&path).map(|dir| dir.join(name)).find(|p| p.is_file())
}

/// First `MAJOR.MINOR.PATCH` appearing in `text`.
fn scan_version(text: &str) -> Option<Version> {
    text.split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .filter(|tok| tok.split('.').filter(|p| !p.is_empty()).count() >= 3)
        .find_map(|tok| {
            let parts: Vec<&str> = tok.split('.').take(3).collect();
            Version::parse(&parts.join(".")).ok()
        })
}

/// Converts a Solidity/npm-style version expression (`^0.4.24`,
/// `>=0.4.22 <0.6.0`, `0.5.0`, `a || b`) into alternatives of Rust semver
/// requirements. A bare version means exact match, as in npm.
pub fn parse_pragma(expr: &str) -> Result<Vec<VersionReq>, String> {
    let mut alternatives = Vec::new();
    for alt in expr.split("||") {
        let mut comparators: Vec<String> = Vec::new();
        let mut pending_op = String::new();
        for tok in alt.split_whitespace() {
            if tok.chars().all(|c| "<>=^~".contains(c)) {
                pending_op.push_str(tok);
                continue;
            }
            let full = format!("{pending_op}{tok}");
            pending_op.clear();
            let op_len = full.find(|c: char| c.is_ascii_digit()).unwrap_or(full.len());
            let (op, ver) = full.split_at(op_len);
            let op = if op.is_empty() { "=" } else { op };
            comparators.push(format!("{op}{ver}"));
        }
        if comparators.is_empty() {
            continue;
        }
        let req = VersionReq::parse(&comparators.join(", ")).map_err(|e| format!("{expr:?}: {e}"))?;
        alternatives.push(req);
    }
    if alternatives.is_empty() {
        return Err(format!("empty version expression {expr:?}"));
    }
    Ok(alternatives)
}

/// Every `pragma solidity …;` expression in the source.
pub fn pragma_expressions(source: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = source;
    while let Some(pos) = rest.find("pragma") {
        let after = &rest[pos + "pragma".len()..];
        let trimmed = after.trim_start();
        if let Some(body) = trimmed.strip_prefix("solidity") {
            if let Some(end) = body.find(';') {
                out.push(body[..end].trim().to_string());
            }
        }
        rest = after;
    }
    out
}

fn satisfies(version: &Version, expr: &str) -> Result<bool, String> {
    // Build metadata is irrelevant to matching.
    let plain = Version::new(version.major, version.minor, version.patch);
    Ok(parse_pragma(expr)?.iter().any(|req| req.matches(&plain)))
}

impl SolidityCompiler {
    /// Locates the executable and probes its version.
    pub fn discover(config: &CompilerConfig) -> Result<Self, CompilerError> {
        let executable = config
            .executable
            .clone()
            .or_else(|| env::var_os(COMPILER_ENV).map(PathBuf::from))
            .or_else(|| find_on_path("solc"))
            .or_else(|| find_on_path("solcjs"))
            .ok_or_else(|| {
                CompilerError::CompilerNotFound(format!("set {COMPILER_ENV} or put solc/solcjs on PATH"))
            })?;
        let interface = config.interface.unwrap_or_else(|| {
            let name = executable.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
            if name.contains("solcjs") {
                CompilerInterface::StandardJson
            } else {
                CompilerInterface::CombinedJson
            }
        });
        let output = Command::new(&executable).arg("--version").stdin(Stdio::null()).output().map_err(|e| {
            CompilerError::CompilerNotFound(format!("{}: {e}", executable.display()))
        })?;
        let text = format!("{}{}", String::from_utf8_lossy(&output.stdout), String::from_utf8_lossy(&output.stderr));
        let version = scan_version(&text)
            .ok_or_else(|| CompilerError::BadOutput(format!("no version in `--version` output: {text:?}")))?;
        if let Some(hint) = &config.version_hint {
            match satisfies(&version, hint) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(CompilerError::VersionUnresolvable { pragma: hint.clone(), compiler: version.to_string() })
                }
                Err(e) => return Err(CompilerError::BadOutput(e)),
            }
        }
        Ok(Self { executable, interface, version, optimizer: config.optimizer })
    }

    pub fn version(&self) -> &Version {
        &self.version
    }

    pub fn executable(&self) -> &Path {
        &self.executable
    }

    pub fn interface(&self) -> CompilerInterface {
        self.interface
    }

    /// Compiles one source unit. When it defines several contracts, the one
    /// with the largest runtime bytecode is returned (ties by name).
    pub fn compile(&self, source: &str) -> Result<CompiledContract, CompilerError> {
        for pragma in pragma_expressions(source) {
            let ok = satisfies(&self.version, &pragma).map_err(|_| CompilerError::VersionUnresolvable {
                pragma: pragma.clone(),
                compiler: self.version.to_string(),
            })?;
            if !ok {
                return Err(CompilerError::VersionUnresolvable { pragma, compiler: self.version.to_string() });
            }
        }
        let contracts = match self.interface {
            CompilerInterface::CombinedJson => self.run_combined(source)?,
            CompilerInterface::StandardJson => self.run_standard(source)?,
        };
        contracts
            .into_iter()
            .filter(|c| !c.runtime.is_empty())
            .max_by(|a, b| a.runtime.len().cmp(&b.runtime.len()).then(b.name.cmp(&a.name)))
            .ok_or_else(|| CompilerError::CompileError { stderr: "no deployable contract in source".into() })
    }

    fn run_combined(&self, source: &str) -> Result<Vec<CompiledContract>, CompilerError> {
        let dir = tempfile::tempdir()?;
        let file = dir.path().join("Contract.sol");
        std::fs::write(&file, source)?;
        let mut cmd = Command::new(&self.executable);
        cmd.arg("--combined-json").arg("bin,bin-runtime");
        if self.optimizer {
            cmd.arg("--optimize");
        }
        let output = cmd.arg(&file).current_dir(dir.path()).stdin(Stdio::null()).output()?;
        let stdout = String::from_utf8_lossy(&output.stdout);
        if !output.status.success() {
            return Err(CompilerError::CompileError { stderr: String::from_utf8_lossy(&output.stderr).into_owned() });
        }
        let json = extract_json(&stdout)?;
        let contracts = json
            .get("contracts")
            .and_then(Value::as_object)
            .ok_or_else(|| CompilerError::BadOutput("missing `contracts`".into()))?;
        let mut out = Vec::new();
        for (key, entry) in contracts {
            let name = key.rsplit(':').next().unwrap_or(key).to_string();
            let get = |field: &str| entry.get(field).and_then(Value::as_str).unwrap_or_default().to_ascii_lowercase();
            out.push(CompiledContract { name, creation: get("bin"), runtime: get("bin-runtime") });
        }
        Ok(out)
    }

    fn run_standard(&self, source: &str) -> Result<Vec<CompiledContract>, CompilerError> {
        let input = serde_json::json!({
            "language": "Solidity",
            "sources": { "Contract.sol": { "content": source } },
            "settings": {
                "optimizer": { "enabled": self.optimizer, "runs": 200 },
                "outputSelection": { "*": { "*": ["evm.bytecode.object", "evm.deployedBytecode.object"] } }
            }
        });
        let dir = tempfile::tempdir()?;
        let mut child = Command::new(&self.executable)
            .arg("--standard-json")
            .current_dir(dir.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        child.stdin.take().expect("piped stdin").write_all(input.to_string().as_bytes())?;
        let output = child.wait_with_output()?;
        let stdout = String::from_utf8_lossy(&output.stdout);
        let json = match extract_json(&stdout) {
            Ok(json) => json,
            Err(_) if !output.status.success() => {
                return Err(CompilerError::CompileError {
                    stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
                })
            }
            Err(e) => return Err(e),
        };
        let errors: Vec<String> = json
            .get("errors")
            .and_then(Value::as_array)
            .map(|errs| {
                errs.iter()
                    .filter(|e| e.get("severity").and_then(Value::as_str) == Some("error"))
                    .map(|e| {
                        e.get("formattedMessage")
                            .or_else(|| e.get("message"))
                            .and_then(Value::as_str)
                            .unwrap_or("unknown error")
                            .to_string()
                    })
                    .collect()
            })
            .unwrap_or_default();
        if !errors.is_empty() {
            return Err(CompilerError::CompileError { stderr: errors.join("\n") });
        }
        let mut out = Vec::new();
        if let Some(files) = json.get("contracts").and_then(Value::as_object) {
            for contracts in files.values().filter_map(Value::as_object) {
                for (name, c) in contracts {
                    let obj = |path: &[&str]| {
                        path.iter()
                            .try_fold(c, |v, k| v.get(*k))
                            .and_then(Value::as_str)
                            .unwrap_or_default()
                            .to_ascii_lowercase()
                    };
                    out.push(CompiledContract {
                        name: name.clone(),
                        creation: obj(&["evm", "bytecode", "object"]),
                        runtime: obj(&["evm", "deployedBytecode", "object"]),
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Some front ends print banner lines before the JSON document.
fn extract_json(stdout: &str) -> Result<Value, CompilerError> {
    let start = stdout
        .find("\n{")
        .map(|i| i + 1)
        .or_else(|| stdout.starts_with('{').then_some(0))
        .ok_or_else(|| CompilerError::BadOutput(format!("no JSON document in output ({} bytes)", stdout.len())))?;
    serde_json::from_str(stdout[start..].trim()).map_err(|e| CompilerError::BadOutput(e.to_string()))
}
