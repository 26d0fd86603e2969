//! On-disk corpus layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/session_<s>/round_<r>/class_<c>/img_<i>.pgm
//! ```
//!
//! `<c>` is the class name and `<i>` the image's position within its round,
//! zero-padded to five digits. The manifest carries the corpus digest, which is
//! recomputed and checked on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GeneratorConfig, GestureClass, LabeledImage, Round, Session, SessionCorpus, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::pgm::{load_pgm, save_pgm};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// `[height, width]`
    pub resolution: [usize; 2],
    pub sessions: usize,
    pub rounds_per_session: usize,
    pub images_per_class_per_round: usize,
    pub classes: Vec<String>,
    pub total_images: usize,
    pub digest: String,
    /// Present when the corpus came from the synthetic generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

impl Manifest {
    pub fn describe(corpus: &SessionCorpus, generator: Option<&GeneratorConfig>) -> Self {
        let (h, w) = corpus.resolution();
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            resolution: [h, w],
            sessions: corpus.sessions().len(),
            rounds_per_session: corpus.rounds_per_session(),
            images_per_class_per_round: corpus.images_per_class(),
            classes: GestureClass::ALL.iter().map(|c| c.name().to_string()).collect(),
            total_images: corpus.total_images(),
            digest: corpus.digest(),
            generator: generator.cloned(),
        }
    }
}

fn image_path(dir: &Path, img: &LabeledImage) -> std::path::PathBuf {
    dir.join(format!("session_{}", img.session_id))
        .join(format!("round_{}", img.round_id))
        .join(format!("class_{}", img.label.name()))
        .join(format!("img_{:05}.pgm", img.index))
}

/// Writes every image plus the manifest. Existing files are overwritten.
pub fn write_corpus(corpus: &SessionCorpus, generator: Option<&GeneratorConfig>, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    for img in corpus.images() {
        let path = image_path(dir, img);
        let parent = path.parent().expect("image path has a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
        save_pgm(&img.pixels, &path)?;
    }
    let manifest = Manifest::describe(corpus, generator);
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}

/// Reads a corpus written by [`write_corpus`] and verifies it against the manifest.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<(SessionCorpus, Manifest)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Corpus(format!(
            "manifest schema version {} is not supported",
            manifest.schema_version
        )));
    }
    if manifest.classes.len() != CLASS_COUNT {
        return Err(Error::Corpus(format!("manifest lists {} classes", manifest.classes.len())));
    }
    let [h, w] = manifest.resolution;
    let mut sessions = Vec::with_capacity(manifest.sessions);
    for s in 1..=manifest.sessions as u32 {
        let mut rounds = Vec::with_capacity(manifest.rounds_per_session);
        for r in 1..=manifest.rounds_per_session as u32 {
            let mut images = Vec::with_capacity(CLASS_COUNT * manifest.images_per_class_per_round);
            let mut index = 0u32;
            for class in GestureClass::ALL {
                for _ in 0..manifest.images_per_class_per_round {
                    let mut img = LabeledImage {
                        pixels: crate::tensor::Tensor::zeros(&[1, h, w]),
                        label: class,
                        session_id: s,
                        round_id: r,
                        index,
                    };
                    let pixels = load_pgm(image_path(dir, &img))?;
                    if pixels.shape() != [1, h, w] {
                        return Err(Error::Corpus(format!(
                            "{}: {:?} image in a {h}×{w} corpus",
                            image_path(dir, &img).display(),
                            pixels.shape()
                        )));
                    }
                    img.pixels = pixels;
                    images.push(img);
                    index += 1;
                }
            }
            rounds.push(Round { id: r, images });
        }
        sessions.push(Session { id: s, rounds });
    }
    let corpus = SessionCorpus::new((h, w), sessions)?;
    let digest = corpus.digest();
    if digest != manifest.digest {
        return Err(Error::Corpus(format!(
            "digest mismatch: manifest {}, files {digest}",
            manifest.digest
        )));
    }
    Ok((corpus, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            resolution: [8, 8],
            sessions_count: 2,
            rounds_per_session: 2,
            images_per_class_per_round: 2,
            session_shift_px: 1.0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn write_then_read_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let corpus = generate_corpus(&cfg).unwrap();
        let written = write_corpus(&corpus, Some(&cfg), dir.path()).unwrap();
        assert!(dir.path().join("session_2/round_1/class_pinky/img_00009.pgm").exists());
        let (back, manifest) = read_corpus(dir.path()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(manifest, written);
        assert_eq!(manifest.total_images, 40);
    }

    #[test]
    fn tampered_image_fails_digest() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small()).unwrap();
        write_corpus(&corpus, None, dir.path()).unwrap();
        let victim = dir.path().join("session_1/round_1/class_open/img_00000.pgm");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = bytes[last].wrapping_add(1);
        std::fs::write(&victim, bytes).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Corpus(m)) if m.contains("digest")));
    }

    #[test]
    fn missing_image_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small()).unwrap();
        write_corpus(&corpus, None, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("session_2/round_2/class_ring/img_00007.pgm")).unwrap();
        let err = read_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("img_00007.pgm"), "{err}");
    }
}
