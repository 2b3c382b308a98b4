//! Storage-efficiency accounting for a packed corpus.

use super::DatasetManifest;

/// Compares the packed container against a 16 kHz mono 16-bit PCM baseline
/// covering the same duration. `packed_bytes` counts the tight bit-packed
/// payload only; header- and 16-bit-word accounting are reported alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub utterances: usize,
    pub total_frames: u64,
    pub duration_seconds: f64,
    /// Tight bit-packed payload (no header).
    pub packed_bytes: u64,
    /// Full file: header plus payload.
    pub file_bytes: u64,
    /// The same codes stored as one 16-bit word each.
    pub word16_bytes: u64,
    /// duration x 16000 samples/s x 2 bytes.
    pub pcm16_equivalent_bytes: u64,
    /// pcm16_equivalent_bytes / packed_bytes.
    pub ratio: f64,
    /// pcm16_equivalent_bytes / file_bytes.
    pub ratio_with_header: f64,
    /// Packed code bits emitted per second of audio, ignoring alignment.
    pub theoretical_bits_per_second: f64,
}

const PCM_SAMPLE_RATE: u64 = 16_000;
const PCM_BYTES_PER_SAMPLE: u64 = 2;
const PCM_BITS_PER_SECOND: f64 = (PCM_SAMPLE_RATE * PCM_BYTES_PER_SAMPLE * 8) as f64;

pub fn storage_report(manifest: &DatasetManifest) -> StorageReport {
    let total_frames = manifest.total_frames();
    let duration_seconds = total_frames as f64 / manifest.frame_rate_hz as f64;
    let packed_bytes = manifest.payload_bytes;
    let file_bytes = manifest.header_bytes().len() as u64 + packed_bytes;
    let word16_bytes = total_frames * manifest.n_codebooks() as u64 * 2;
    let pcm16_equivalent_bytes = (total_frames as u128 * PCM_SAMPLE_RATE as u128
        * PCM_BYTES_PER_SAMPLE as u128
        / manifest.frame_rate_hz as u128) as u64;
    let theoretical_bits_per_second =
        manifest.bits_per_frame() as f64 * manifest.frame_rate_hz as f64;
    StorageReport {
        utterances: manifest.n_utterances(),
        total_frames,
        duration_seconds,
        packed_bytes,
        file_bytes,
        word16_bytes,
        pcm16_equivalent_bytes,
        ratio: pcm16_equivalent_bytes as f64 / packed_bytes as f64,
        ratio_with_header: pcm16_equivalent_bytes as f64 / file_bytes as f64,
        theoretical_bits_per_second,
    }
}

impl StorageReport {
    /// Ratio of PCM bitrate to packed code bitrate, header-free.
    pub fn theoretical_bitrate_ratio(&self) -> f64 {
        PCM_BITS_PER_SECOND / self.theoretical_bits_per_second
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "utterances: {}  frames: {}  duration: {:.2} s\n",
            self.utterances, self.total_frames, self.duration_seconds
        ));
        s.push_str(&format!(
            "packed payload: {} bytes  file (with header): {} bytes  16-bit words: {} bytes\n",
            self.packed_bytes, self.file_bytes, self.word16_bytes
        ));
        s.push_str(&format!(
            "pcm16 equivalent (16 kHz mono): {} bytes\n",
            self.pcm16_equivalent_bytes
        ));
        s.push_str(&format!(
            "ratio vs pcm16: {:.1}x (payload only), {:.1}x (with header)\n",
            self.ratio, self.ratio_with_header
        ));
        s.push_str(&format!(
            "bitrate: {:.0} bits/s packed vs {:.0} bits/s pcm16 ({:.1}x)\n",
            self.theoretical_bits_per_second,
            PCM_BITS_PER_SECOND,
            self.theoretical_bitrate_ratio()
        ));
        s.push_str(
            "reference (not measured here): LibriSpeech-960 wav 60.4 GB vs codec units 3.6 GB, 16.5x\n",
        );
        s
    }
}
