use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uvlm_core::data::{gen_corpus, glyph, load_corpus, read_payload, write_corpus, write_payload, CorpusConfig, ModalityCounts};
use uvlm_core::train::{decode_checkpoint, encode_checkpoint, ModelState, ModelDims};
use uvlm_core::Error;

fn tiny() -> CorpusConfig {
    CorpusConfig {
        stage1: ModalityCounts { images: 3, videos: 3 },
        stage2_train: ModalityCounts { images: 4, videos: 4 },
        stage2_val: ModalityCounts { images: 1, videos: 1 },
        stage2_test: ModalityCounts { images: 2, videos: 2 },
        ..CorpusConfig::default()
    }
}

#[test]
fn corpus_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(&tiny()).unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
}

#[test]
fn payloads_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus = gen_corpus(&tiny()).unwrap();
    let still = glyph::render(&glyph::random_still(&mut rng));
    for (i, v) in corpus.visuals.iter().take(2).chain([&still]).enumerate() {
        let p = dir.path().join(format!("{i}.uvlm"));
        write_payload(&p, v).unwrap();
        assert_eq!(&read_payload(&p).unwrap(), v);
    }
}

#[test]
fn truncated_payload_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.uvlm");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    write_payload(&p, &glyph::render(&glyph::random_still(&mut rng))).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_payload(&p), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let state = ModelState::init(ModelDims::default(), 3);
    let bytes = encode_checkpoint(&state);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back), bytes);
    assert_eq!(back.digests(), state.digests());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let mut bytes = encode_checkpoint(&ModelState::init(ModelDims::default(), 0));
    bytes.truncate(bytes.len() / 2);
    assert!(decode_checkpoint(&bytes).is_err());
    assert!(decode_checkpoint(b"nonsense").is_err());
}
