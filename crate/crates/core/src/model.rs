use crate::attr_select::SelectionParams;
use crate::encoders::{AttributeContextPrompt, BodyPromptBank, DualEncoder, ImageTensor};
use crate::error::Result;
use crate::tape::Mat;

/// A frozen encoder together with the learned prompts and selection module.
#[derive(Debug, Clone)]
pub struct OaprModel {
    pub encoder: DualEncoder,
    pub body_prompts: BodyPromptBank,
    pub context: AttributeContextPrompt,
    pub selection: SelectionParams,
}

impl OaprModel {
    /// `N × C` body-part features of one image.
    pub fn body_features(&self, image: &ImageTensor) -> Result<Mat> {
        Ok(self.encoder.encode_image(image, &self.body_prompts)?.f_img_body)
    }

    /// `A × C` unit attribute features; any phrase works, seen in training or not.
    pub fn attribute_features(&self, phrases: &[String]) -> Result<Mat> {
        self.encoder.encode_attributes(&self.context, phrases)
    }

    pub fn image_size(&self) -> usize {
        self.encoder.vision_config().image_size
    }
}
