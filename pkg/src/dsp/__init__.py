# Signal processing: sampled-signal core, channel sounding, RTF features
