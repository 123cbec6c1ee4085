use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use scvd_core::evm::{disassemble, CompilerConfig, CompilerError, CompilerInterface, SolidityCompiler};

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    path
}

const FAKE_COMBINED: &str = r#"
if [ "$1" = "--version" ]; then
  echo "solc, the solidity compiler commandline interface"
  echo "Version: 0.4.25+commit.59dbf8f1.Linux.g++"
  exit 0
fi
if grep -q SYNTAX_ERROR "$3"; then
  echo "Contract.sol:1:1: ParserError: Expected pragma, import directive or contract/interface/library definition." >&2
  exit 1
fi
echo '{"contracts":{"Contract.sol:Base":{"bin":"6080","bin-runtime":"00"},"Contract.sol:Main":{"bin":"60806040","bin-runtime":"6001600201"}},"version":"0.4.25"}'
"#;

fn fake(dir: &Path) -> SolidityCompiler {
    let exe = script(dir, "solc", FAKE_COMBINED);
    SolidityCompiler::discover(&CompilerConfig { executable: Some(exe), ..Default::default() }).unwrap()
}

#[test]
fn combined_json_picks_the_largest_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let solc = fake(dir.path());
    assert_eq!(solc.interface(), CompilerInterface::CombinedJson);
    assert_eq!(solc.version().to_string(), "0.4.25");
    let out = solc.compile("pragma solidity ^0.4.24;\ncontract Main {}").unwrap();
    assert_eq!(out.name, "Main");
    assert_eq!(out.creation, "60806040");
    assert_eq!(out.runtime, "6001600201");
}

#[test]
fn compiler_diagnostics_are_carried() {
    let dir = tempfile::tempdir().unwrap();
    let solc = fake(dir.path());
    match solc.compile("SYNTAX_ERROR") {
        Err(CompilerError::CompileError { stderr }) => assert!(stderr.contains("ParserError"), "{stderr}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unsatisfiable_pragma() {
    let dir = tempfile::tempdir().unwrap();
    let solc = fake(dir.path());
    assert!(matches!(
        solc.compile("pragma solidity ^0.8.0; contract C {}"),
        Err(CompilerError::VersionUnresolvable { .. })
    ));
    let exe = script(dir.path(), "solc2", FAKE_COMBINED);
    let hinted = SolidityCompiler::discover(&CompilerConfig {
        executable: Some(exe),
        version_hint: Some("^0.8.0".into()),
        ..Default::default()
    });
    assert!(matches!(hinted, Err(CompilerError::VersionUnresolvable { .. })));
}

#[test]
fn missing_executable() {
    let r = SolidityCompiler::discover(&CompilerConfig {
        executable: Some("/nonexistent/solc".into()),
        ..Default::default()
    });
    assert!(matches!(r, Err(CompilerError::CompilerNotFound(_))));
}

#[test]
fn standard_json_with_banner_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let exe = script(
        dir.path(),
        "solcjs",
        r#"
if [ "$1" = "--version" ]; then echo "0.8.26+commit.8a97fa7a.Emscripten.clang"; exit 0; fi
input=$(cat)
echo ">>> banner line"
case "$input" in
  *broken*) echo '{"errors":[{"severity":"error","formattedMessage":"ParserError: Expected identifier"}]}' ;;
  *) echo '{"errors":[{"severity":"warning","message":"w"}],"contracts":{"Contract.sol":{"C":{"evm":{"bytecode":{"object":"6080"},"deployedBytecode":{"object":"60FE"}}}}}}' ;;
esac
"#,
    );
    let solc = SolidityCompiler::discover(&CompilerConfig { executable: Some(exe), ..Default::default() }).unwrap();
    assert_eq!(solc.interface(), CompilerInterface::StandardJson);
    let ok = solc.compile("contract C {}").unwrap();
    assert_eq!(ok.runtime, "60fe");
    match solc.compile("contract broken {") {
        Err(CompilerError::CompileError { stderr }) => assert!(stderr.contains("Expected identifier")),
        other => panic!("unexpected {other:?}"),
    }
}

/// Runs only when a real compiler is discoverable.
fn real_compiler() -> Option<SolidityCompiler> {
    match SolidityCompiler::discover(&CompilerConfig::default()) {
        Ok(c) if c.version().major == 0 && c.version().minor >= 8 => Some(c),
        _ => {
            eprintln!("no 0.8.x compiler available; skipping");
            None
        }
    }
}

#[test]
fn real_minimal_contract() {
    let Some(solc) = real_compiler() else { return };
    let out = solc.compile("pragma solidity ^0.8.0;\ncontract C {}").unwrap();
    assert!(!out.runtime.is_empty());
    assert!(!disassemble(&out.runtime).unwrap().is_empty());
    assert!(out.creation.len() > out.runtime.len());
}

#[test]
fn real_syntax_error() {
    let Some(solc) = real_compiler() else { return };
    match solc.compile("pragma solidity ^0.8.0;\ncontract C { function }") {
        Err(CompilerError::CompileError { stderr }) => assert!(stderr.contains("Error"), "{stderr}"),
        other => panic!("unexpected {other:?}"),
    }
}
