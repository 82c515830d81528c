//! Builds an NLI example from a task template, encodes it at every P and
//! shows that the masked single pass agrees with separate encoding.

use std::collections::HashMap;

use lait::{
    apply_template, classify, lait_encode, lait_encode_masked, tokenize, ModelConfig, ModelWeights, SegmentedExample,
    TaskTemplate,
};

fn main() -> lait::Result<()> {
    let template = TaskTemplate::builtin("mnli")?;
    let fields = HashMap::from([
        (
            "premise".to_string(),
            "A man inspects the uniform of a figure in some East Asian country.".to_string(),
        ),
        ("hypothesis".to_string(), "The man is sleeping.".to_string()),
    ]);
    let texts = apply_template(&template, &fields)?;
    for t in &texts {
        println!("segment: {t}");
    }

    let base = ModelConfig::tiny(6, 0, 32, 4, 64);
    let segments = texts
        .iter()
        .map(|t| tokenize(t, &base))
        .collect::<lait::Result<Vec<_>>>()?;
    let ex = SegmentedExample::from_segments(segments)?;
    println!("lengths {:?}", lait::segment_lengths(&ex));

    for p in 0..=base.layers {
        let w = ModelWeights::<f32>::init(&base.with_parallel_layers(p), template.labels.len(), 7)?;
        let separate = lait_encode(&ex, &w, None)?;
        let masked = lait_encode_masked(&ex, &w)?;
        let (label, _) = classify(&separate.reps, w.head())?;
        println!(
            "P={p}: attention pairs {:>5}, masked-path diff {:.2e}, predicted {}",
            separate.counter.attention_pairs,
            separate.reps.max_abs_diff(&masked.reps),
            template.labels[label]
        );
    }
    Ok(())
}
