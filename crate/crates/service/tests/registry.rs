use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wordsmith::registry::{Registry, RegistryError};
use wordsmith_core::checkpoint::Container;

fn blob(tag: &str) -> Vec<u8> {
    let mut c = Container::new("policy", serde_json::json!({ "tag": tag }));
    c.push_blob("data", tag.as_bytes().to_vec());
    c.to_bytes()
}

#[test]
fn identical_bytes_get_the_same_id() {
    let dir = tempfile::tempdir().unwrap();
    let mut reg = Registry::open(dir.path()).unwrap();
    let a = reg.register("A person is kicking.", &blob("k")).unwrap();
    let b = reg.store(&blob("k")).unwrap();
    assert_eq!(a, b);
    assert_eq!(reg.ids().unwrap(), vec![a.clone()]);
    assert_eq!(reg.fetch(&a).unwrap(), blob("k"));
}

#[test]
fn unregistered_prompt_has_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    assert_eq!(reg.lookup("A person is waving."), None);
    assert!(matches!(reg.fetch(&"0".repeat(64)), Err(RegistryError::NotFound(_))));
    assert!(matches!(reg.fetch("../escape"), Err(RegistryError::NotFound(_))));
}

#[test]
fn retrain_replaces_the_mapping_and_keeps_the_old_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut reg = Registry::open(dir.path()).unwrap();
    let p = "A person is walking forward.";
    let old = reg.register(p, &blob("v1")).unwrap();
    let new = reg.register(p, &blob("v2")).unwrap();
    assert_ne!(old, new);
    assert_eq!(reg.lookup(p), Some(new.as_str()));
    assert_eq!(reg.fetch(&old).unwrap(), blob("v1"));
    assert_eq!(reg.mappings().len(), 1);
    assert_eq!(reg.ids().unwrap().len(), 2);
}

#[test]
fn corrupt_input_and_files_fail_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let mut reg = Registry::open(dir.path()).unwrap();
    let mut bad = blob("x");
    let n = bad.len();
    bad[n - 1] ^= 1;
    assert!(matches!(reg.register("p", &bad), Err(RegistryError::Invalid { .. })));
    assert_eq!(reg.lookup("p"), None);

    let id = reg.store(&blob("y")).unwrap();
    let path = reg.path_of(&id);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(reg.fetch(&id), Err(RegistryError::Invalid { .. })));

    // A valid container stored under someone else's id.
    let other = reg.store(&blob("z")).unwrap();
    std::fs::copy(reg.path_of(&other), &path).unwrap();
    assert!(matches!(reg.fetch(&id), Err(RegistryError::Mismatch { .. })));
}

#[test]
fn bind_requires_a_stored_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut reg = Registry::open(dir.path()).unwrap();
    assert!(reg.bind("p", &"a".repeat(64)).is_err());
    let id = reg.store(&blob("b")).unwrap();
    reg.bind("p", &id).unwrap();
    assert_eq!(reg.lookup("p"), Some(id.as_str()));
    // A fresh handle over the same directory sees the file but not the mapping.
    let again = Registry::open(dir.path()).unwrap();
    assert!(again.contains(&id));
    assert_eq!(again.lookup("p"), None);
}

#[test]
fn random_register_sequences_keep_ids_unique_and_fetchable() {
    use rand::Rng;
    let dir = tempfile::tempdir().unwrap();
    let mut reg = Registry::open(dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut expected = std::collections::BTreeMap::new();
    for _ in 0..200 {
        let prompt = format!("prompt {}", rng.random_range(0..10));
        let tag = format!("{}", rng.random_range(0..30));
        let id = reg.register(&prompt, &blob(&tag)).unwrap();
        expected.insert(prompt, (id, tag));
    }
    for (prompt, (id, tag)) in &expected {
        assert_eq!(reg.lookup(prompt), Some(id.as_str()));
        assert_eq!(reg.fetch(id).unwrap(), blob(tag));
    }
    let ids = reg.ids().unwrap();
    let mut dedup = ids.clone();
    dedup.dedup();
    assert_eq!(ids, dedup);
}
