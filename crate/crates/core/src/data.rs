//! Turning corpus samples into model inputs.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::corpus::{CorpusManifest, SampleRef};
use crate::error::{Error, Result};
use crate::model::{Encoded, Network};
use crate::raster::{downsample, render, PageImage, CANONICAL_RES};

/// A training or evaluation triple at canonical resolution.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: PageImage,
    pub question: String,
    pub answer: String,
}

/// Renders each distinct document referenced by `refs` once.
pub fn render_pages(manifest: &CorpusManifest, refs: &[SampleRef]) -> Result<BTreeMap<String, PageImage>> {
    let mut ids: Vec<&str> = refs.iter().map(|r| r.doc_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.par_iter()
        .map(|id| {
            let doc = manifest.doc(id).ok_or_else(|| Error::ManifestMismatch(format!("unknown document {id}")))?;
            Ok((id.to_string(), render(doc, CANONICAL_RES)?.image))
        })
        .collect()
}

/// Teacher-forcing inputs for the referenced QA pairs, in order.
pub fn encode_samples(net: &Network, manifest: &CorpusManifest, refs: &[SampleRef]) -> Result<Vec<Encoded>> {
    let pages = render_pages(manifest, refs)?;
    let res = net.config.input_res;
    let small: BTreeMap<&str, PageImage> =
        pages.par_iter().map(|(id, img)| Ok((id.as_str(), downsample(img, res)?))).collect::<Result<_>>()?;
    refs.par_iter()
        .map(|r| {
            let qa = manifest.qa(r).ok_or_else(|| Error::ManifestMismatch(format!("unknown sample {r:?}")))?;
            net.encode_example(&small[r.doc_id.as_str()], &qa.question, Some(&qa.answer))
        })
        .collect()
}

/// Encodes arbitrary examples (augmented or attack inputs).
pub fn encode_examples(net: &Network, examples: &[Example], with_answer: bool) -> Result<Vec<Encoded>> {
    let res = net.config.input_res;
    examples
        .par_iter()
        .map(|e| {
            let img = downsample(&e.image, res)?;
            net.encode_example(&img, &e.question, with_answer.then_some(e.answer.as_str()))
        })
        .collect()
}
