use dcgl_core::corpus::{gen_synthetic, SemanticEmbeddingFile, SynthConfig, EMBEDDING_MAGIC};
use proptest::prelude::*;

fn arb_file() -> impl Strategy<Value = (usize, Vec<(u32, Vec<u32>)>)> {
    (1usize..6).prop_flat_map(|dim| {
        let entry = (any::<u32>(), prop::collection::vec(any::<u32>(), dim));
        (Just(dim), prop::collection::vec(entry, 0..12))
    })
}

proptest! {
    // Raw f32 bit patterns, NaN payloads included, survive write/read/write.
    #[test]
    fn bytes_round_trip((dim, raw) in arb_file()) {
        let entries = raw
            .into_iter()
            .map(|(id, bits)| (id, bits.into_iter().map(f32::from_bits).collect()))
            .collect();
        let file = SemanticEmbeddingFile { dim, entries };
        let mut first = Vec::new();
        file.write(&mut first).unwrap();
        prop_assert_eq!(&first[..8], EMBEDDING_MAGIC);
        let back = SemanticEmbeddingFile::read(first.as_slice()).unwrap();
        let mut second = Vec::new();
        back.write(&mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn truncation_is_an_error((dim, raw) in arb_file(), cut in 1usize..64) {
        let entries = raw.into_iter().map(|(id, bits)| (id, bits.into_iter().map(f32::from_bits).collect())).collect();
        let mut buf = Vec::new();
        SemanticEmbeddingFile { dim, entries }.write(&mut buf).unwrap();
        let keep = buf.len().saturating_sub(cut);
        prop_assert!(SemanticEmbeddingFile::read(&buf[..keep]).is_err());
    }
}

#[test]
fn generated_file_covers_every_entity() {
    let data = gen_synthetic(&SynthConfig::default()).unwrap();
    let mut buf = Vec::new();
    data.semantic.write(&mut buf).unwrap();
    let back = SemanticEmbeddingFile::read(buf.as_slice()).unwrap();
    assert_eq!(back, data.semantic);
    assert_eq!(back.entries.len(), data.kg.num_entities);
    let (matrix, missing) = back.to_entity_matrix(&data.id_map, &data.kg);
    assert_eq!(missing, 0);
    assert_eq!(matrix.dim(), (data.kg.num_entities, back.dim));
}
