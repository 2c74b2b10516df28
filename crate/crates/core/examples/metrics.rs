//! Corpus BLEU-4, ROUGE-L, information density and NetScore.

use signformer::decode::{bleu4, information_density, netscore, rouge_l, NetScoreWeights};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn main() -> signformer::Result<()> {
    let refs = vec![
        words("am tag wechselhaft mit regen und schnee"),
        words("morgen scheint im norden die sonne"),
    ];
    let hyps = vec![
        words("am tag wechselhaft mit regen"),
        words("morgen scheint im süden die sonne"),
    ];
    let b = bleu4(&hyps, &refs)?;
    let r = rouge_l(&hyps, &refs)?;
    println!("bleu4   = {b:.4}");
    println!("rouge_l = {r:.4}");
    println!("bleu4 on itself = {}", bleu4(&refs, &refs)?);

    let params_m = 0.57;
    println!("info density at {params_m}M params = {:.3}", information_density(b, params_m)?);
    println!(
        "netscore at 0.05 GMACs = {:.3}",
        netscore(b, params_m, 0.05, NetScoreWeights::default())?
    );
    Ok(())
}
