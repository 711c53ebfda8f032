use std::fs;
use std::path::Path;

use qcode_core::pipeline::run_demo;

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn demo_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_demo(7, a.path()).unwrap();
    let sb = run_demo(7, b.path()).unwrap();
    assert_eq!(sa, sb);
    let ta = read_tree(a.path());
    assert_eq!(ta, read_tree(b.path()));
    assert_eq!(ta.iter().filter(|(n, _)| n.starts_with("runs/")).count(), 23);
    assert!(ta.iter().all(|(_, bytes)| !bytes.contains(&b'\r')));
}

#[test]
fn demo_summary_is_sane() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_demo(7, dir.path()).unwrap();
    println!("{}", serde_json::to_string_pretty(&s).unwrap());
    assert_eq!(s.variants, 23);
    assert_eq!(s.excluded, 3);
    assert_eq!(s.run_failures, 0);
    assert!(s.disagreements > 0);
    assert!(s.proposals_ratified > 0);
    assert!(s.revalidation_kappa.is_defined());
    assert_eq!((s.autonomous_themes, s.autonomous_codes, s.autonomous_duplicates), (11, 26, 16));
}

#[test]
fn seeds_change_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_demo(1, a.path()).unwrap();
    let sb = run_demo(2, b.path()).unwrap();
    assert_ne!(sa.files, sb.files);
}
